use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a principal direction is
/// treated as absent.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance along each of the two directions.
    pub explained: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Token mean of `h^(L)` over real tokens.
pub fn prompt_embedding(encoder: &TextEncoder, prompt: &str) -> Result<Vec<f64>> {
    let (seq, trace) = encoder.trace(prompt)?;
    let (_, d) = trace.final_out.dims2()?;
    let mut out = vec![0.0; d];
    for row in trace.final_out.rows().take(seq.real_len) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= seq.real_len as f64);
    Ok(out)
}

/// Projects centered rows onto the two leading eigenvectors of their
/// covariance. Each direction is signed so that its largest-magnitude
/// component is positive.
pub fn pca_project_2d(rows: &[(String, Vec<f64>)]) -> Result<Projection> {
    if rows.len() < 3 {
        return Err(Error::Config(format!("PCA needs at least 3 vectors, got {}", rows.len())));
    }
    let d = rows[0].1.len();
    if d == 0 {
        return Err(Error::Config("PCA on zero-dimensional vectors".into()));
    }
    if let Some((label, v)) = rows.iter().find(|(_, v)| v.len() != d) {
        return Err(Error::Config(format!(
            "vector {label:?} has dimension {}, expected {d}",
            v.len()
        )));
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for (_, v) in rows {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].1[j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lead = eig.eigenvalues[order[0]].max(0.0);

    let mut warning = None;
    let mut dirs = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda <= RANK_TOL * lead || lead == 0.0 {
            dirs.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("d > 0");
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        explained[slot] = lambda / total;
        dirs.push(Some(v));
    }
    if dirs.len() < 2 || dirs.iter().any(Option::is_none) {
        let msg = "point set has rank < 2; missing coordinates are 0".to_string();
        log::warn!("{msg}");
        warning = Some(msg);
    }

    let coord = |i: usize, dir: &Option<Vec<f64>>| match dir {
        Some(v) => x.row(i).iter().zip(v).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    let points = rows
        .iter()
        .enumerate()
        .map(|(i, (label, _))| ProjectedPoint {
            label: label.clone(),
            x: coord(i, &dirs[0]),
            y: dirs.get(1).map_or(0.0, |dir| coord(i, dir)),
        })
        .collect();
    Ok(Projection {
        points,
        explained,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn labelled(vs: Vec<Vec<f64>>) -> Vec<(String, Vec<f64>)> {
        vs.into_iter().enumerate().map(|(i, v)| (format!("p{i}"), v)).collect()
    }

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    fn normal(rng: &mut ChaCha20Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn plane_in_high_dims_preserves_distances() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = 10;
        // Orthonormal pair spanning the plane.
        let u: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w: Vec<f64> = w.iter().map(|x| x / nw).collect();

        let coords: Vec<(f64, f64)> = (0..8).map(|_| (3.0 * normal(&mut rng), normal(&mut rng))).collect();
        let vs = coords
            .iter()
            .map(|&(a, b)| (0..d).map(|j| a * u[j] + b * w[j] + 1.5).collect())
            .collect();
        let proj = pca_project_2d(&labelled(vs)).unwrap();
        assert!(proj.warning.is_none());
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                let pi = (proj.points[i].x, proj.points[i].y);
                let pj = (proj.points[j].x, proj.points[j].y);
                assert!((dist(pi, pj) - dist(coords[i], coords[j])).abs() < 1e-9);
            }
        }
        assert!((proj.explained[0] + proj.explained[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_project_identically() {
        let vs = vec![
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.0, 2.0],
            vec![1.0, 2.0, 0.5],
            vec![0.0, 3.0, -1.0],
        ];
        let proj = pca_project_2d(&labelled(vs)).unwrap();
        assert_eq!(proj.points[0].x, proj.points[2].x);
        assert_eq!(proj.points[0].y, proj.points[2].y);
    }

    #[test]
    fn rank_two_plus_noise_captures_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let d = 12;
        let basis: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let vs = (0..30)
            .map(|_| {
                let (a, b) = (normal(&mut rng), normal(&mut rng));
                (0..d)
                    .map(|j| a * basis[0][j] + b * basis[1][j] + 1e-4 * normal(&mut rng))
                    .collect()
            })
            .collect();
        let proj = pca_project_2d(&labelled(vs)).unwrap();
        assert!(proj.explained[0] + proj.explained[1] > 0.99);
    }

    #[test]
    fn collinear_points_warn() {
        let vs = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        let proj = pca_project_2d(&labelled(vs)).unwrap();
        assert!(proj.warning.is_some());
        assert!(proj.points.iter().all(|p| p.y == 0.0));
        // Sign convention: the leading direction is (+, +)/sqrt(2).
        assert!(proj.points[2].x > 0.0);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(pca_project_2d(&labelled(vec![vec![1.0], vec![2.0]])).is_err());
        assert!(pca_project_2d(&labelled(vec![vec![1.0], vec![2.0], vec![1.0, 2.0]])).is_err());
    }

    #[test]
    fn ordering_invariant_up_to_sign() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let vs: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| normal(&mut rng)).collect()).collect();
        let a = pca_project_2d(&labelled(vs.clone())).unwrap();
        let rev: Vec<(String, Vec<f64>)> = labelled(vs).into_iter().rev().collect();
        let b = pca_project_2d(&rev).unwrap();
        for p in &a.points {
            let q = b.points.iter().find(|q| q.label == p.label).unwrap();
            assert!((p.x.abs() - q.x.abs()).abs() < 1e-9);
            assert!((p.y.abs() - q.y.abs()).abs() < 1e-9);
        }
    }
}
