//! Slow reference implementations the engine is checked against.

/// Per-group, per-dimension maxima over five scale groups with boundaries
/// 1/16, 1/8, 1/4, 1/2; empty groups are zero.
pub fn multiscale_max(rows: &[Vec<f64>], boxes: &[[u32; 4]], width: u32, height: u32) -> Vec<f64> {
    let dim = rows[0].len();
    let frame_area = f64::from(width) * f64::from(height);
    let group_of = |b: &[u32; 4]| {
        let ratio = f64::from(b[2] - b[0]) * f64::from(b[3] - b[1]) / frame_area;
        let mut g = 0;
        for edge in [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0] {
            if ratio > edge {
                g += 1;
            }
        }
        g
    };
    let mut out = Vec::new();
    for g in 0..5 {
        for d in 0..dim {
            let mut best: Option<f64> = None;
            for (row, b) in rows.iter().zip(boxes) {
                if group_of(b) == g {
                    best = Some(match best {
                        Some(v) if v >= row[d] => v,
                        _ => row[d],
                    });
                }
            }
            out.push(best.unwrap_or(0.0));
        }
    }
    out
}

/// All-point AP from pairwise rank counting: item `j` precedes `i` when it
/// scores higher or ties with a smaller index.
pub fn brute_force_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let n = scores.len();
    let before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for i in 0..n {
        if !relevant[i] {
            continue;
        }
        let rank = 1 + (0..n).filter(|&j| before(j, i)).count();
        let hits = 1 + (0..n).filter(|&j| relevant[j] && before(j, i)).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    let total = terms.len();
    let mut sum = 0.0;
    for (_, p) in terms {
        sum += p;
    }
    sum / total as f64
}

/// Minimizes `1/2 |w|^2 + 1/2 b^2 + C sum hinge` by accelerated projected
/// gradient on the box-constrained dual. Returns `(w, b)`.
pub fn svm_dual_projected_gradient(x: &[Vec<f64>], y: &[f64], cost: f64) -> (Vec<f64>, f64) {
    let m = x.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut q = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            q[i][j] = y[i] * y[j] * (dot(&x[i], &x[j]) + 1.0);
        }
    }
    // largest eigenvalue of Q by power iteration, padded slightly
    let mut v = vec![1.0; m];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let next: Vec<f64> = (0..m).map(|i| dot(&q[i], &v)).collect();
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / dot(&v, &v).sqrt();
        v = next.iter().map(|x| x / norm).collect();
    }
    let mut step = 1.0 / (1.05 * lambda.max(1e-12));
    let grad = |a: &[f64]| -> Vec<f64> { (0..m).map(|i| dot(&q[i], a) - 1.0).collect() };
    let objective = |a: &[f64]| 0.5 * dot(a, &(0..m).map(|i| dot(&q[i], a)).collect::<Vec<_>>()) - a.iter().sum::<f64>();
    let project = |v: f64| v.clamp(0.0, cost);
    let mut a = vec![0.0; m];
    let mut z = a.clone();
    let mut t = 1.0f64;
    let mut last = objective(&a);
    for it in 0..400_000 {
        let g = grad(&z);
        let next: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| project(zi - step * gi)).collect();
        let value = objective(&next);
        if value > last + 1e-13 * last.abs() {
            // adaptive restart; a failing plain step means the step is too long
            if z == a {
                step = (step * 0.5).max(0.25 / lambda);
            }
            t = 1.0;
            z = a.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = next.iter().zip(&a).map(|(n, o)| n + (t - 1.0) / t_next * (n - o)).collect();
        z.iter_mut().for_each(|v| *v = project(*v));
        t = t_next;
        a = next;
        last = value;
        if it % 50 == 0 {
            let (w, b) = primal_point(x, y, &a);
            let primal = svm_primal(&w, b, x, y, cost);
            let dual = 0.5 * (dot(&w, &w) + b * b) - a.iter().sum::<f64>();
            if primal + dual <= 1e-8 * primal {
                break;
            }
        }
    }
    primal_point(x, y, &a)
}

fn primal_point(x: &[Vec<f64>], y: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for i in 0..x.len() {
        for d in 0..dim {
            w[d] += a[i] * y[i] * x[i][d];
        }
        b += a[i] * y[i];
    }
    (w, b)
}

pub fn svm_primal(w: &[f64], b: f64, x: &[Vec<f64>], y: &[f64], cost: f64) -> f64 {
    let mut value = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    for (xi, yi) in x.iter().zip(y) {
        let s: f64 = w.iter().zip(xi).map(|(p, q)| p * q).sum::<f64>() + b;
        value += cost * (1.0 - yi * s).max(0.0);
    }
    value
}

/// Holidays-style mAP from a full pairwise cosine table: each query ranks
/// all other items by similarity (ties by id) and scores group-mates.
pub fn holidays_exhaustive(ids: &[&str], vectors: &[Vec<f64>], groups: &[&str], queries: &[&str]) -> f64 {
    let n = ids.len();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let table: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(&vectors[i], &vectors[j])).collect()).collect();
    let mut aps = Vec::new();
    for q in queries {
        let qi = ids.iter().position(|i| i == q).unwrap();
        let mut others: Vec<usize> = (0..n).filter(|&j| j != qi).collect();
        others.sort_by(|&a, &b| table[qi][b].partial_cmp(&table[qi][a]).unwrap().then(ids[a].cmp(ids[b])));
        let relevant: Vec<bool> = others.iter().map(|&j| groups[j] == groups[qi]).collect();
        let total = relevant.iter().filter(|r| **r).count();
        let mut hits = 0;
        let mut sum = 0.0;
        for (k, r) in relevant.iter().enumerate() {
            if *r {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        aps.push((q.to_string(), sum / total as f64));
    }
    aps.sort_by(|a, b| a.0.cmp(&b.0));
    aps.iter().map(|a| a.1).sum::<f64>() / aps.len() as f64
}
