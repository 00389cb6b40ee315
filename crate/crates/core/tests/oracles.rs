//! Independent reference implementations checked against the library.

use diagen_core::metrics::{precision_with, recall_with, Strategy};
use diagen_core::weighting::{
    calibrate_temperature, nll, probe_loss, train_probe, ProbeParams,
};
use diagen_core::FeatureTable;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

fn blobs(seed: u64, per_class: usize) -> FeatureTable {
    let mut r = rng(seed);
    let centres = [[0.0, 3.0], [2.6, -1.5], [-2.6, -1.5]];
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (c, centre) in centres.iter().enumerate() {
        for i in 0..per_class {
            ids.push(format!("{c}-{i}"));
            labels.push(format!("c{c}"));
            rows.push(centre.iter().map(|m| m + noise.sample(&mut r)).collect());
        }
    }
    FeatureTable::new(ids, labels, rows).unwrap()
}

/// Full-batch gradient descent with a fixed step, run for a long horizon.
fn gradient_descent_loss(table: &FeatureTable, classes: usize, l2: f64) -> f64 {
    let d = table.dim();
    let ys: Vec<usize> = table
        .labels()
        .iter()
        .map(|l| l[1..].parse().unwrap())
        .collect();
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let n = table.len() as f64;
    let loss = |w: &[Vec<f64>], b: &[f64]| {
        let mut total = 0.0;
        for (x, &y) in table.rows().zip(&ys) {
            let z: Vec<f64> = (0..classes)
                .map(|k| w[k].iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b[k])
                .collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / n + 0.5 * l2 * w.iter().flatten().map(|v| v * v).sum::<f64>()
    };
    for _ in 0..60_000 {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in table.rows().zip(&ys) {
            let z: Vec<f64> = (0..classes)
                .map(|k| w[k].iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b[k])
                .collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..classes {
                let r = e[k] / s - if k == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    gw[k][j] += r * x[j] / n;
                }
                gb[k] += r / n;
            }
        }
        for k in 0..classes {
            for j in 0..d {
                w[k][j] -= 0.05 * (gw[k][j] + l2 * w[k][j]);
            }
            b[k] -= 0.05 * gb[k];
        }
    }
    loss(&w, &b)
}

#[test]
fn probe_matches_gradient_descent_oracle() {
    let table = blobs(7, 8);
    let classes: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
    let params = ProbeParams::default();
    let probe = train_probe(&table, &classes, params).unwrap();
    let ours = probe_loss(&probe, &table, params.l2).unwrap();
    let oracle = gradient_descent_loss(&table, 3, params.l2);
    assert!(
        (ours - oracle).abs() < 1e-3,
        "probe {ours} vs gradient descent {oracle}"
    );
    assert!(ours <= oracle + 1e-9);
}

fn grid_minimum(z: &[Vec<f64>], y: &[usize]) -> (f64, f64) {
    let mut best = (f64::NAN, f64::INFINITY);
    let mut t = 0.05;
    while t <= 20.0 + 1e-12 {
        let v = nll(z, y, t);
        if v < best.1 {
            best = (t, v);
        }
        t += 1e-3;
    }
    best
}

/// Logit groups whose labels occur in exactly the softmax proportions.
fn calibrated_set() -> (Vec<Vec<f64>>, Vec<usize>) {
    let groups: [(&[f64], &[usize]); 3] = [
        (&[4.0, 1.0], &[4, 1]),
        (&[3.0, 1.0, 1.0], &[3, 1, 1]),
        (&[1.0, 2.0, 7.0], &[1, 2, 7]),
    ];
    let mut zs = Vec::new();
    let mut ys = Vec::new();
    for (weights, counts) in groups {
        let z: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                zs.push(z.clone());
                ys.push(class);
            }
        }
    }
    (zs, ys)
}

#[test]
fn calibrated_logits_keep_unit_temperature() {
    let (z, y) = calibrated_set();
    let t = calibrate_temperature(&z, &y).unwrap().value();
    let (grid_t, grid_v) = grid_minimum(&z, &y);
    assert!((t - 1.0).abs() < 1e-2, "T* = {t}");
    assert!((grid_t - 1.0).abs() < 2e-2, "grid T = {grid_t}");
    assert!(nll(&z, &y, t) <= grid_v + 1e-3);
}

#[test]
fn random_logits_match_grid_oracle() {
    let mut r = rng(99);
    for _ in 0..5 {
        let n = r.random_range(1..40);
        let c = r.random_range(2..6);
        let scale = r.random_range(0.1..8.0);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| scale * r.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let t = calibrate_temperature(&z, &y).unwrap().value();
        let (_, grid_v) = grid_minimum(&z, &y);
        assert!(nll(&z, &y, t) <= grid_v + 1e-3);
        assert!(nll(&z, &y, t) <= nll(&z, &y, 1.0));
    }
}

/// Precision and recall straight from the definitions.
fn oracle(real: &[Vec<f64>], syn: &[Vec<f64>], k: usize) -> (f64, f64) {
    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
    fn radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
        set.iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d = Vec::new();
                for (j, q) in set.iter().enumerate() {
                    if i != j {
                        d.push(dist(p, q));
                    }
                }
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[k - 1]
            })
            .collect()
    }
    fn fraction(queries: &[Vec<f64>], set: &[Vec<f64>], r: &[f64]) -> f64 {
        let mut inside = 0;
        for q in queries {
            let mut hit = false;
            for (p, rad) in set.iter().zip(r) {
                if dist(q, p) <= *rad {
                    hit = true;
                }
            }
            if hit {
                inside += 1;
            }
        }
        inside as f64 / queries.len() as f64
    }
    (
        fraction(syn, real, &radii(real, k)),
        fraction(real, syn, &radii(syn, k)),
    )
}

fn cloud(r: &mut impl Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| shift + r.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn metrics_match_oracle_on_fifty_plus_fifty() {
    let mut r = rng(4);
    let real = cloud(&mut r, 50, 4, 0.0);
    let syn = cloud(&mut r, 50, 4, 0.3);
    let expect = oracle(&real, &syn, 5);
    for s in [Strategy::Naive, Strategy::Accelerated] {
        assert_eq!(precision_with(&real, &syn, 5, s).unwrap(), expect.0);
        assert_eq!(recall_with(&real, &syn, 5, s).unwrap(), expect.1);
    }
    assert!(expect.0 > 0.0 && expect.0 < 1.0);
}

#[test]
fn boundary_points_count_on_integer_lattice() {
    // many exact distance ties; closed balls must agree with the oracle
    let mut r = rng(12);
    for _ in 0..50 {
        let real: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..2).map(|_| r.random_range(0..4) as f64).collect())
            .collect();
        let syn: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..2).map(|_| r.random_range(0..5) as f64).collect())
            .collect();
        let expect = oracle(&real, &syn, 3);
        assert_eq!(precision_with(&real, &syn, 3, Strategy::Accelerated).unwrap(), expect.0);
        assert_eq!(recall_with(&real, &syn, 3, Strategy::Accelerated).unwrap(), expect.1);
    }
}
