//! Synthetic Gaussian-mixture datasets and k-NN manifold metrics.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::SampleBatch;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset<T> {
    pub points: SampleBatch<T>,
    pub labels: Vec<usize>,
    pub num_components: usize,
}

impl<T: Real> ToyDataset<T> {
    pub fn new(points: SampleBatch<T>, labels: Vec<usize>, num_components: usize) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::layout("dataset labels", points.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_components) {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_components})"
            )));
        }
        Ok(Self {
            points,
            labels,
            num_components,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_components: self.num_components,
        }
    }

    /// Count of points per component.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_components];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Writes `x0,x1,...,label` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.points.dim())
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, &label) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.points.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{label}", row.join(","))?;
        }
        Ok(())
    }
}

/// Isotropic Gaussian mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub n_per_component: usize,
}

impl MixtureSpec {
    /// `k` components evenly spaced on a circle of `radius` in the plane.
    pub fn ring(k: usize, radius: f64, std: f64, n_per_component: usize) -> Self {
        let centers = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            centers,
            std,
            n_per_component,
        }
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        let dim = self.dim();
        if dim == 0 || self.centers.iter().any(|c| c.len() != dim) {
            return Err(Error::config(
                "mixture centers must share a positive dimension",
            ));
        }
        if !(self.std >= 0.0) {
            return Err(Error::config("mixture std must be non-negative"));
        }
        Ok(())
    }

    pub fn generate<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ToyDataset<T>> {
        gen_gaussian_mixture(&self.centers, self.n_per_component, self.std, rng)
    }
}

/// `n_per_component` i.i.d. draws around each center, component-major.
pub fn gen_gaussian_mixture<T: Real, R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    n_per_component: usize,
    std: f64,
    rng: &mut R,
) -> Result<ToyDataset<T>> {
    let dim = centers.first().map_or(0, Vec::len);
    if centers.is_empty() || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::config("mixture centers must share a dimension"));
    }
    let mut rows = Vec::with_capacity(centers.len() * n_per_component);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_component {
            rows.push(
                c.iter()
                    .map(|&m| T::lit(m + std * rng.sample::<f64, _>(StandardNormal)))
                    .collect::<Vec<T>>(),
            );
            labels.push(k);
        }
    }
    let points = if rows.is_empty() {
        SampleBatch::new(ndarray::Array2::zeros((0, dim)))
    } else {
        SampleBatch::from_rows(&rows)?
    };
    ToyDataset::new(points, labels, centers.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnMetrics {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Squared distance from every row to its k-th nearest other row.
fn knn_radii<T: Real>(s: &SampleBatch<T>, k: usize) -> Vec<f64> {
    let n = s.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(s.row(i), s.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect()
}

/// Precision, recall, density and coverage with k-NN balls. A point's own
/// distance is excluded when its radius is computed.
pub fn knn_metrics<T: Real>(
    real: &SampleBatch<T>,
    fake: &SampleBatch<T>,
    k: usize,
) -> Result<KnnMetrics> {
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if real.rows() <= k || fake.rows() <= k {
        return Err(Error::config(format!(
            "k-NN metrics need more than k = {k} points per set"
        )));
    }
    if real.dim() != fake.dim() {
        return Err(Error::layout(
            "knn metric dimension",
            real.dim(),
            fake.dim(),
        ));
    }
    let real_r = knn_radii(real, k);
    let fake_r = knn_radii(fake, k);
    let (n, m) = (real.rows(), fake.rows());

    let mut precise = 0usize;
    let mut density_hits = 0usize;
    for j in 0..m {
        let y = fake.row(j);
        let inside = (0..n)
            .filter(|&i| sq_dist(real.row(i), y) <= real_r[i])
            .count();
        if inside > 0 {
            precise += 1;
        }
        density_hits += inside;
    }
    let recalled = (0..n)
        .filter(|&i| {
            let x = real.row(i);
            (0..m).any(|j| sq_dist(fake.row(j), x) <= fake_r[j])
        })
        .count();
    let covered = (0..n)
        .filter(|&i| {
            let x = real.row(i);
            (0..m).any(|j| sq_dist(fake.row(j), x) <= real_r[i])
        })
        .count();
    Ok(KnnMetrics {
        precision: precise as f64 / m as f64,
        recall: recalled as f64 / n as f64,
        density: density_hits as f64 / (k * m) as f64,
        coverage: covered as f64 / n as f64,
    })
}
