//! PCA rotation and Lloyd k-means.
//!
//! [`improved_kmeans`] is the dictionary refit used during training: it rotates the
//! data into its PCA basis, runs Lloyd iterations on a growing number of leading
//! coordinates, and rotates the result back.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data_io::VectorSet;
use crate::kernels::sq_dist_f32;
use crate::{parallel, Error, Result};

/// Default number of stages in a dimension schedule.
pub const DEFAULT_STAGES: usize = 10;
/// Default Lloyd iteration budget per stage.
pub const DEFAULT_MAX_ITERS: usize = 30;

/// A fitted PCA basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    dim: usize,
    /// Row `i` is the `i`-th principal axis; rows are ordered by descending variance.
    rotation: Vec<f64>,
    mean: Vec<f64>,
    variances: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        &self.rotation[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Variance of the data along each axis, non-increasing.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// `R (x - mean)`.
    pub fn transform_row(&self, x: &[f32], out: &mut [f32]) {
        let d = self.dim;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, &m)| v as f64 - m).collect();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let axis = &self.rotation[i * d..(i + 1) * d];
            *o = axis.iter().zip(&centered).map(|(a, c)| a * c).sum::<f64>() as f32;
        }
    }

    /// `Rᵀ y + mean`.
    pub fn inverse_row(&self, y: &[f32], out: &mut [f32]) {
        let d = self.dim;
        let mut acc = self.mean.clone();
        for (i, &yi) in y.iter().enumerate().take(d) {
            let axis = &self.rotation[i * d..(i + 1) * d];
            for (a, &r) in acc.iter_mut().zip(axis) {
                *a += r * yi as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }

    pub fn transform(&self, data: &VectorSet) -> VectorSet {
        self.map_rows(data, Self::transform_row)
    }

    pub fn inverse(&self, data: &VectorSet) -> VectorSet {
        self.map_rows(data, Self::inverse_row)
    }

    fn map_rows(&self, data: &VectorSet, f: fn(&Self, &[f32], &mut [f32])) -> VectorSet {
        let d = self.dim;
        let mut out = vec![0f32; data.len() * d];
        parallel::for_each_chunk_mut(&mut out, d, |i, chunk| f(self, data.row(i), chunk));
        VectorSet::new(d, out).expect("rotation of finite data is finite")
    }
}

/// Fits a PCA basis by eigendecomposition of the centered covariance, or of the
/// Gram matrix when there are fewer points than dimensions. Axes the data does not
/// span are completed to a full orthonormal basis.
pub fn pca_fit(data: &VectorSet) -> Result<PcaModel> {
    let (n, d) = (data.len(), data.dim());
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 points, got {n}")));
    }
    let mut mean = vec![0f64; d];
    for row in data.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| data.row(i)[j] as f64 - mean[j]);
    let denom = (n - 1) as f64;

    let mut axes: Vec<(f64, Vec<f64>)> = if n >= d {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        (0..d)
            .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
            .collect()
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let tol = scale * 1e-10 * n as f64;
        let mut axes = Vec::new();
        for i in 0..n {
            let lambda = eig.eigenvalues[i];
            if lambda <= tol || lambda <= 0.0 {
                continue;
            }
            let u = eig.eigenvectors.column(i);
            let v = centered.transpose() * u / lambda.sqrt();
            axes.push((lambda / denom, v.iter().copied().collect()));
        }
        axes
    };
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for (var, v) in axes {
        if let Some(v) = orthonormalize(&basis, v) {
            basis.push(v);
            variances.push(var);
        }
    }
    // Gram-Schmidt completion with the standard basis.
    let mut e = 0;
    while basis.len() < d && e < d {
        let mut unit = vec![0f64; d];
        unit[e] = 1.0;
        if let Some(v) = orthonormalize(&basis, unit) {
            basis.push(v);
            variances.push(0.0);
        }
        e += 1;
    }
    if basis.len() != d {
        return Err(Error::Invariant("failed to complete an orthonormal basis".into()));
    }
    for v in &mut basis {
        // Fix signs so the largest-magnitude component is positive.
        let (_, pivot) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1.abs() { (i, x) } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(PcaModel {
        dim: d,
        rotation: basis.concat(),
        mean,
        variances,
    })
}

/// Two-pass modified Gram-Schmidt against `basis`; `None` if `v` is (numerically) in its span.
fn orthonormalize(basis: &[Vec<f64>], mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm0 == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let p: f64 = b.iter().zip(&v).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-8 * norm0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Strictly increasing active-dimension counts ending at the full dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionSchedule {
    dims: Vec<usize>,
}

impl DimensionSchedule {
    /// `ceil(d^(i/I))` for `i = 1..=I`, deduplicated, last entry forced to `d`.
    pub fn geometric(d: usize, stages: usize) -> Self {
        assert!(d >= 1 && stages >= 1, "schedule needs d >= 1 and at least one stage");
        let mut dims: Vec<usize> = Vec::with_capacity(stages);
        for i in 1..=stages {
            let x = (d as f64).powf(i as f64 / stages as f64);
            // Guard against powf landing a hair above an exact integer.
            let v = ((x - 1e-9).ceil() as usize).clamp(1, d);
            if dims.last() != Some(&v) {
                dims.push(v);
            }
        }
        if dims.last() != Some(&d) {
            dims.push(d);
        }
        Self { dims }
    }

    /// A single full-dimension stage.
    pub fn full(d: usize) -> Self {
        Self { dims: vec![d] }
    }

    pub fn from_dims(dims: Vec<usize>, d: usize) -> Result<Self> {
        let ok = !dims.is_empty()
            && dims.windows(2).all(|w| w[0] < w[1])
            && dims[0] >= 1
            && *dims.last().unwrap() == d;
        if !ok {
            return Err(Error::invalid(format!(
                "dimension schedule {dims:?} must be strictly increasing and end at {d}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }
}

/// `k` centroids and the current nearest-centroid assignment of each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    k: usize,
    d: usize,
    data: Vec<f32>,
    assignment: Vec<u32>,
}

impl Centroids {
    pub fn new(k: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 || data.len() != k * d {
            return Err(Error::invalid(format!(
                "centroid data of length {} does not match k={k}, d={d}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centroids must be finite"));
        }
        Ok(Self {
            k,
            d,
            data,
            assignment: Vec::new(),
        })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self::new(k, d, vec![0.0; k * d]).expect("valid shape")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Nearest-centroid index per point from the last assignment step.
    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }
}

/// Nearest centroid over the leading `active` coordinates; ties go to the lower index.
fn nearest(x: &[f32], centroids: &[f32], k: usize, d: usize, active: usize) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for c in 0..k {
        let dist = sq_dist_f32(&x[..active], &centroids[c * d..c * d + active]);
        if dist < best.1 {
            best = (c as u32, dist);
        }
    }
    best
}

fn assign(data: &VectorSet, centroids: &[f32], k: usize, active: usize) -> (Vec<u32>, Vec<f32>) {
    let d = data.dim();
    parallel::map_indexed(data.len(), |i| nearest(data.row(i), centroids, k, d, active))
        .into_iter()
        .unzip()
}

fn mean_error(errors: &[f32]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().map(|&e| e as f64).sum::<f64>() / errors.len() as f64
}

/// Mean squared distance of each point to its nearest centroid (all coordinates).
pub fn quantization_error(data: &VectorSet, centroids: &Centroids) -> Result<f64> {
    if data.dim() != centroids.d {
        return Err(Error::DimensionMismatch {
            expected: centroids.d,
            found: data.dim(),
        });
    }
    let (_, err) = assign(data, &centroids.data, centroids.k, centroids.d);
    Ok(mean_error(&err))
}

/// Lloyd iterations whose assignment step only looks at the first `active_dims`
/// coordinates. The update step still averages every coordinate of the assigned
/// points. Stops after `max_iters` updates or once assignments are stable.
pub fn lloyd_kmeans(
    data: &VectorSet,
    init: &Centroids,
    active_dims: usize,
    max_iters: usize,
) -> Result<Centroids> {
    lloyd_kmeans_traced(data, init, active_dims, max_iters).map(|(c, _)| c)
}

/// As [`lloyd_kmeans`], also returning the mean active-dimension objective after
/// the initial assignment and after every iteration.
pub fn lloyd_kmeans_traced(
    data: &VectorSet,
    init: &Centroids,
    active_dims: usize,
    max_iters: usize,
) -> Result<(Centroids, Vec<f64>)> {
    let (n, d, k) = (data.len(), init.d, init.k);
    if data.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: data.dim(),
        });
    }
    if active_dims == 0 || active_dims > d {
        return Err(Error::invalid(format!(
            "active dimensions {active_dims} must be in 1..={d}"
        )));
    }
    if k > n {
        return Err(Error::invalid(format!("k={k} exceeds the number of points {n}")));
    }
    let mut centroids = init.data.clone();
    let (mut assignment, mut errors) = assign(data, &centroids, k, active_dims);
    let mut history = vec![mean_error(&errors)];

    for _ in 0..max_iters {
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..d {
                    centroids[c * d + j] = (sums[c * d + j] * inv) as f32;
                }
            }
        }
        if counts.contains(&0) {
            repair_empty(data, &mut centroids, &assignment, &counts, k, active_dims);
        }
        let (next, next_err) = assign(data, &centroids, k, active_dims);
        history.push(mean_error(&next_err));
        let stable = next == assignment;
        assignment = next;
        errors = next_err;
        if stable {
            break;
        }
    }
    let _ = errors;
    Ok((
        Centroids {
            k,
            d,
            data: centroids,
            assignment,
        },
        history,
    ))
}

/// Moves each empty centroid onto the point with the largest current error,
/// where "current" includes centroids placed earlier in the same repair.
fn repair_empty(
    data: &VectorSet,
    centroids: &mut [f32],
    assignment: &[u32],
    counts: &[usize],
    k: usize,
    active: usize,
) {
    let d = data.dim();
    let mut err: Vec<f32> = parallel::map_indexed(data.len(), |i| {
        let a = assignment[i] as usize;
        sq_dist_f32(&data.row(i)[..active], &centroids[a * d..a * d + active])
    });
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let mut best = (usize::MAX, 0f32);
        for (i, &e) in err.iter().enumerate() {
            if e > best.1 {
                best = (i, e);
            }
        }
        if best.0 == usize::MAX {
            // Every point already sits on a centroid.
            break;
        }
        let x = data.row(best.0);
        centroids[c * d..(c + 1) * d].copy_from_slice(x);
        let seed = &x[..active];
        for (i, e) in err.iter_mut().enumerate() {
            let dist = sq_dist_f32(&data.row(i)[..active], seed);
            if dist < *e {
                *e = dist;
            }
        }
    }
}

/// Dimension-incremental k-means.
///
/// Fits PCA on `data`, rotates data and `init` into that basis, runs
/// [`lloyd_kmeans`] on the first `d_1`, then `d_2`, ... coordinates (each stage
/// warm-started from the previous one) and rotates the centroids back. If the
/// staged result ends up worse than `init` on the full-dimensional objective, the
/// result of plain full-dimensional Lloyd from `init` is returned instead, so the
/// output never quantizes `data` worse than `init` does.
pub fn improved_kmeans(
    data: &VectorSet,
    init: &Centroids,
    schedule: &DimensionSchedule,
    max_iters: usize,
) -> Result<Centroids> {
    if data.is_empty() {
        return Err(Error::invalid("cannot cluster an empty set"));
    }
    let d = init.d;
    if data.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: data.dim(),
        });
    }
    if *schedule.dims().last().unwrap() != d {
        return Err(Error::invalid("schedule does not end at the data dimension"));
    }
    if init.k > data.len() {
        return Err(Error::invalid(format!(
            "k={} exceeds the number of points {}",
            init.k,
            data.len()
        )));
    }

    let staged = if data.len() >= 2 {
        let pca = pca_fit(data)?;
        let rotated = pca.transform(data);
        let init_vs = VectorSet::new(d, init.data.clone())?;
        let mut current = Centroids::new(init.k, d, pca.transform(&init_vs).into_vec())?;
        for &active in schedule.dims() {
            current = lloyd_kmeans(&rotated, &current, active, max_iters)?;
        }
        let back = pca.inverse(&VectorSet::new(d, current.data)?);
        Centroids::new(init.k, d, back.into_vec())?
    } else {
        lloyd_kmeans(data, init, d, max_iters)?
    };

    let (assignment, errors) = assign(data, &staged.data, staged.k, d);
    let staged_err = mean_error(&errors);
    let (_, init_errors) = assign(data, &init.data, init.k, d);
    let init_err = mean_error(&init_errors);
    if staged_err <= init_err {
        return Ok(Centroids {
            assignment,
            ..staged
        });
    }
    lloyd_kmeans(data, init, d, max_iters)
}
