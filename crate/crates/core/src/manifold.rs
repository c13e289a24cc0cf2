//! Synthetic point clouds on closed-form submanifolds.
//!
//! Each built-in manifold has an exact sampler for its declared density, a
//! closed-form family of regression targets, and (for circle, sphere and
//! interval) an exact geodesic distance, so every downstream estimator can be
//! checked against an oracle. Clouds embedded above the minimal ambient
//! dimension are padded with zeros and rotated by a seeded random orthogonal
//! matrix, which changes nothing intrinsic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;

use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

/// Built-in manifold kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    Circle,
    Sphere2,
    FlatTorusEmbedded,
    SwissRoll,
    Interval,
}

impl ManifoldKind {
    /// Intrinsic dimension d.
    pub fn intrinsic_dim(self) -> usize {
        match self {
            ManifoldKind::Circle | ManifoldKind::Interval => 1,
            ManifoldKind::Sphere2 | ManifoldKind::FlatTorusEmbedded | ManifoldKind::SwissRoll => 2,
        }
    }

    /// Smallest ambient dimension the canonical embedding needs.
    pub fn min_ambient_dim(self) -> usize {
        match self {
            ManifoldKind::Interval => 1,
            ManifoldKind::Circle => 2,
            ManifoldKind::Sphere2 | ManifoldKind::SwissRoll => 3,
            ManifoldKind::FlatTorusEmbedded => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ManifoldKind::Circle => "circle",
            ManifoldKind::Sphere2 => "sphere2",
            ManifoldKind::FlatTorusEmbedded => "flat-torus-embedded",
            ManifoldKind::SwissRoll => "swiss-roll",
            ManifoldKind::Interval => "interval",
        }
    }
}

/// Swiss roll parameter range: t in [T0, T1], sheet width in [0, W].
const SWISS_T0: f64 = 1.5 * PI;
const SWISS_T1: f64 = 4.5 * PI;
const SWISS_W: f64 = 10.0;

/// Sampling density on the manifold.
///
/// `SmoothTilted { tilt }` multiplies the uniform density by `1 + tilt * c(x)`
/// where `c` is a smooth unit-amplitude function of the first intrinsic
/// coordinate (`cos(theta)` on the circle, the height `z` on the sphere, and
/// so on); `|tilt| < 1` keeps the density bounded away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Density {
    Uniform,
    SmoothTilted { tilt: f64 },
}

/// Full description of a sampling setup; everything downstream is a pure
/// function of this plus the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    /// Ambient dimension D (>= minimal embedding dimension).
    pub ambient_dim: usize,
    pub density: Density,
    pub seed: u64,
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind, ambient_dim: usize, density: Density, seed: u64) -> Self {
        ManifoldSpec {
            kind,
            ambient_dim,
            density,
            seed,
        }
    }

    /// Intrinsic dimension of the underlying manifold.
    pub fn intrinsic_dim(&self) -> usize {
        self.kind.intrinsic_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ambient_dim < self.kind.min_ambient_dim() {
            return Err(Error::UnsupportedManifold(format!(
                "{} needs ambient dimension >= {}, got {}",
                self.kind.name(),
                self.kind.min_ambient_dim(),
                self.ambient_dim
            )));
        }
        if let Density::SmoothTilted { tilt } = self.density {
            if !(tilt.abs() < 1.0) {
                return Err(Error::InvalidParam(format!(
                    "density tilt must satisfy |tilt| < 1, got {tilt}"
                )));
            }
        }
        Ok(())
    }

    /// Orthogonal embedding matrix (None when D equals the minimal dimension,
    /// in which case the canonical embedding is used verbatim).
    pub fn rotation(&self) -> Option<DMatrix<f64>> {
        let d_min = self.kind.min_ambient_dim();
        if self.ambient_dim == d_min {
            return None;
        }
        let mut rng = rng_from_seed(derive_seed(self.seed, &[0x526f_7461]));
        let d = self.ambient_dim;
        let g = DMatrix::from_fn(d, d, |_, _| {
            let u: f64 = rng.gen::<f64>().max(1e-300);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
        });
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Fix the sign convention so the rotation is a deterministic function
        // of the seed rather than of QR internals.
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                for i in 0..d {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        Some(q)
    }
}

/// Regression targets with known smoothness.
///
/// `Trig { k }` is smooth; `HolderKink { beta }` has exactly Holder regularity
/// `beta` at its kink (`|angle|^beta` near angle zero on the circle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum TruthFamily {
    Trig { k: u32 },
    HolderKink { beta: f64 },
}

impl TruthFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruthFamily::Trig { .. } => Ok(()),
            TruthFamily::HolderKink { beta } => {
                if beta > 0.0 && beta <= 2.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParam(format!(
                        "holder-kink exponent must lie in (0, 2], got {beta}"
                    )))
                }
            }
        }
    }

    /// Holder exponent of the family (kink exponent, or 2 for the smooth
    /// family when used as a tuning input).
    pub fn holder_beta(&self) -> f64 {
        match *self {
            TruthFamily::Trig { .. } => 2.0,
            TruthFamily::HolderKink { beta } => beta,
        }
    }
}

/// A sampled cloud together with optional ground truth.
#[derive(Debug, Clone)]
pub struct PointCloud {
    /// N x D row-per-point matrix.
    pub points: DMatrix<f64>,
    /// f0 evaluated at each point, when a truth family has been attached.
    pub true_values: Option<DVector<f64>>,
    /// Holder exponent of the attached generator.
    pub holder_beta: Option<f64>,
    pub spec: ManifoldSpec,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.ncols()
    }

    /// Attach ground-truth values for a target family.
    pub fn with_truth(mut self, family: TruthFamily) -> Result<Self> {
        let vals = eval_truth(&self.spec, &self.points, family)?;
        self.true_values = Some(vals);
        self.holder_beta = Some(family.holder_beta());
        Ok(self)
    }
}

/// Intrinsic coordinates recovered from an ambient point.
#[derive(Debug, Clone, Copy)]
enum Intrinsic {
    Angle(f64),               // circle: theta in (-pi, pi]
    SpherePoint([f64; 3]),    // sphere2: unit vector
    TorusAngles(f64, f64),    // flat torus: (u, v)
    SwissParam(f64, f64),     // swiss roll: (t, y)
    Unit(f64),                // interval: x in [0, 1]
}

fn canonical_coords(spec: &ManifoldSpec, row: &[f64]) -> Result<Vec<f64>> {
    let d_min = spec.kind.min_ambient_dim();
    if row.len() != spec.ambient_dim {
        return Err(Error::LengthMismatch {
            expected: spec.ambient_dim,
            got: row.len(),
        });
    }
    let canon: Vec<f64> = match spec.rotation() {
        None => row.to_vec(),
        Some(q) => {
            // Inverse rotation: q is orthogonal, so q^T maps back.
            let x = DVector::from_column_slice(row);
            let back = q.transpose() * x;
            back.iter().copied().collect()
        }
    };
    // Residual coordinates beyond the canonical embedding must vanish.
    let residual: f64 = canon[d_min..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if residual > 1e-8 {
        return Err(Error::OffManifold { residual });
    }
    Ok(canon[..d_min].to_vec())
}

fn to_intrinsic(spec: &ManifoldSpec, row: &[f64]) -> Result<Intrinsic> {
    let c = canonical_coords(spec, row)?;
    Ok(match spec.kind {
        ManifoldKind::Circle => {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            if (r - 1.0).abs() > 1e-8 {
                return Err(Error::OffManifold {
                    residual: (r - 1.0).abs(),
                });
            }
            Intrinsic::Angle(c[1].atan2(c[0]))
        }
        ManifoldKind::Sphere2 => {
            let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (r - 1.0).abs() > 1e-8 {
                return Err(Error::OffManifold {
                    residual: (r - 1.0).abs(),
                });
            }
            Intrinsic::SpherePoint([c[0], c[1], c[2]])
        }
        ManifoldKind::FlatTorusEmbedded => {
            let s = std::f64::consts::SQRT_2;
            Intrinsic::TorusAngles((c[1] * s).atan2(c[0] * s), (c[3] * s).atan2(c[2] * s))
        }
        ManifoldKind::SwissRoll => {
            let t = (c[0] * c[0] + c[2] * c[2]).sqrt();
            Intrinsic::SwissParam(t, c[1])
        }
        ManifoldKind::Interval => Intrinsic::Unit(c[0]),
    })
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

fn canonical_embed(kind: ManifoldKind, intr: &Intrinsic) -> Vec<f64> {
    match (kind, intr) {
        (ManifoldKind::Circle, Intrinsic::Angle(t)) => vec![t.cos(), t.sin()],
        (ManifoldKind::Sphere2, Intrinsic::SpherePoint(p)) => p.to_vec(),
        (ManifoldKind::FlatTorusEmbedded, Intrinsic::TorusAngles(u, v)) => {
            let s = 1.0 / std::f64::consts::SQRT_2;
            vec![s * u.cos(), s * u.sin(), s * v.cos(), s * v.sin()]
        }
        (ManifoldKind::SwissRoll, Intrinsic::SwissParam(t, y)) => {
            vec![t * t.cos(), *y, t * t.sin()]
        }
        (ManifoldKind::Interval, Intrinsic::Unit(x)) => vec![*x],
        _ => unreachable!("intrinsic coordinate does not match manifold kind"),
    }
}

fn tilt_of(density: Density) -> f64 {
    match density {
        Density::Uniform => 0.0,
        Density::SmoothTilted { tilt } => tilt,
    }
}

fn sample_intrinsic<R: Rng>(spec: &ManifoldSpec, rng: &mut R) -> Intrinsic {
    let a = tilt_of(spec.density);
    match spec.kind {
        ManifoldKind::Circle => {
            // Density 1 + a cos(theta) via rejection under the flat envelope.
            loop {
                let theta = rng.gen::<f64>() * 2.0 * PI;
                if rng.gen::<f64>() * (1.0 + a.abs()) <= 1.0 + a * theta.cos() {
                    return Intrinsic::Angle(wrap_angle(theta));
                }
            }
        }
        ManifoldKind::Sphere2 => loop {
            let z = 2.0 * rng.gen::<f64>() - 1.0;
            if rng.gen::<f64>() * (1.0 + a.abs()) <= 1.0 + a * z {
                let phi = rng.gen::<f64>() * 2.0 * PI;
                let r = (1.0 - z * z).max(0.0).sqrt();
                return Intrinsic::SpherePoint([r * phi.cos(), r * phi.sin(), z]);
            }
        },
        ManifoldKind::FlatTorusEmbedded => loop {
            let u = rng.gen::<f64>() * 2.0 * PI;
            if rng.gen::<f64>() * (1.0 + a.abs()) <= 1.0 + a * u.cos() {
                let v = rng.gen::<f64>() * 2.0 * PI;
                return Intrinsic::TorusAngles(wrap_angle(u), wrap_angle(v));
            }
        },
        ManifoldKind::SwissRoll => {
            // Area element is sqrt(1 + t^2) dt dy; rejection under a flat
            // envelope gives exact area-uniform (optionally tilted) samples.
            let area_bound = (1.0 + SWISS_T1 * SWISS_T1).sqrt();
            loop {
                let t = SWISS_T0 + rng.gen::<f64>() * (SWISS_T1 - SWISS_T0);
                let w = (1.0 + t * t).sqrt() * (1.0 + a * t.cos());
                if rng.gen::<f64>() * (area_bound * (1.0 + a.abs())) <= w {
                    let y = rng.gen::<f64>() * SWISS_W;
                    return Intrinsic::SwissParam(t, y);
                }
            }
        }
        ManifoldKind::Interval => loop {
            let x = rng.gen::<f64>();
            if rng.gen::<f64>() * (1.0 + a.abs()) <= 1.0 + a * (PI * x).cos() {
                return Intrinsic::Unit(x);
            }
        },
    }
}

/// Draw `n` i.i.d. points from the declared density, embedded in ambient
/// dimension D. Deterministic given `spec.seed`.
pub fn sample_cloud(spec: &ManifoldSpec, n: usize) -> Result<PointCloud> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidParam("sample size must be >= 1".into()));
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[0x5361_6d70, n as u64]));
    let d_min = spec.kind.min_ambient_dim();
    let d = spec.ambient_dim;
    let rotation = spec.rotation();

    let mut points = DMatrix::<f64>::zeros(n, d);
    let mut padded = DVector::<f64>::zeros(d);
    for i in 0..n {
        let intr = sample_intrinsic(spec, &mut rng);
        let canon = canonical_embed(spec.kind, &intr);
        padded.fill(0.0);
        padded.rows_mut(0, d_min).copy_from_slice(&canon);
        match &rotation {
            None => points.row_mut(i).copy_from_slice(padded.as_slice()),
            Some(q) => {
                let emb = q * &padded;
                points.row_mut(i).copy_from_slice(emb.as_slice());
            }
        }
    }
    Ok(PointCloud {
        points,
        true_values: None,
        holder_beta: None,
        spec: *spec,
    })
}

fn truth_at(_kind: ManifoldKind, family: TruthFamily, intr: &Intrinsic) -> f64 {
    match family {
        TruthFamily::Trig { k } => {
            let k = k as f64;
            match *intr {
                Intrinsic::Angle(t) => (k * t).cos(),
                // Chebyshev in the height coordinate: cos(k arccos z).
                Intrinsic::SpherePoint(p) => (k * p[2].clamp(-1.0, 1.0).acos()).cos(),
                Intrinsic::TorusAngles(u, _) => (k * u).cos(),
                Intrinsic::SwissParam(t, _) => {
                    let s = 2.0 * PI * (t - SWISS_T0) / (SWISS_T1 - SWISS_T0);
                    (k * s).cos()
                }
                Intrinsic::Unit(x) => (k * PI * x).cos(),
            }
        }
        TruthFamily::HolderKink { beta } => match *intr {
            Intrinsic::Angle(t) => wrap_angle(t).abs().powf(beta),
            Intrinsic::SpherePoint(p) => (p[2].clamp(-1.0, 1.0).acos() - PI / 2.0).abs().powf(beta),
            Intrinsic::TorusAngles(u, _) => wrap_angle(u).abs().powf(beta),
            Intrinsic::SwissParam(t, _) => {
                let s = 2.0 * PI * (t - SWISS_T0) / (SWISS_T1 - SWISS_T0);
                (s - PI).abs().powf(beta)
            }
            Intrinsic::Unit(x) => (x - 0.5).abs().powf(beta),
        },
    }
}

/// Evaluate the ground-truth regression function at each row of `points`.
pub fn eval_truth(
    spec: &ManifoldSpec,
    points: &DMatrix<f64>,
    family: TruthFamily,
) -> Result<DVector<f64>> {
    family.validate()?;
    let n = points.nrows();
    let mut out = DVector::zeros(n);
    let mut row = vec![0.0; points.ncols()];
    for i in 0..n {
        for j in 0..points.ncols() {
            row[j] = points[(i, j)];
        }
        let intr = to_intrinsic(spec, &row)?;
        out[i] = truth_at(spec.kind, family, &intr);
    }
    Ok(out)
}

/// Exact geodesic distance for the closed-form kinds (circle, sphere,
/// interval). Satisfies `|a - b| <= rho(a, b)`.
pub fn geodesic_dist(spec: &ManifoldSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    let ia = to_intrinsic(spec, a)?;
    let ib = to_intrinsic(spec, b)?;
    match (ia, ib) {
        (Intrinsic::Angle(ta), Intrinsic::Angle(tb)) => Ok(wrap_angle(ta - tb).abs()),
        (Intrinsic::SpherePoint(p), Intrinsic::SpherePoint(q)) => {
            let dot = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
            let cross = [
                p[1] * q[2] - p[2] * q[1],
                p[2] * q[0] - p[0] * q[2],
                p[0] * q[1] - p[1] * q[0],
            ];
            let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            Ok(cn.atan2(dot))
        }
        (Intrinsic::Unit(xa), Intrinsic::Unit(xb)) => Ok((xa - xb).abs()),
        _ => Err(Error::NoGeodesic(spec.kind.name().into())),
    }
}

/// Serialize a cloud as CSV (`x0..x{D-1},f0`) plus a JSON sidecar holding the
/// manifold spec. The `f0` column is left empty when no truth is attached.
pub fn write_cloud_csv<P: AsRef<Path>>(cloud: &PointCloud, csv_path: P) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path.as_ref())?;
    let d = cloud.ambient_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("f0".into());
    wtr.write_record(&header)?;
    for i in 0..cloud.len() {
        let mut rec: Vec<String> = (0..d).map(|j| format!("{}", cloud.points[(i, j)])).collect();
        rec.push(match &cloud.true_values {
            Some(v) => format!("{}", v[i]),
            None => String::new(),
        });
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;

    let sidecar = sidecar_path(csv_path.as_ref());
    let mut f = std::fs::File::create(sidecar)?;
    let meta = CloudSidecar {
        spec: cloud.spec,
        holder_beta: cloud.holder_beta,
    };
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudSidecar {
    spec: ManifoldSpec,
    holder_beta: Option<f64>,
}

fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    let mut p = csv_path.to_path_buf();
    let stem = p
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into());
    p.set_file_name(format!("{stem}.spec.json"));
    p
}

/// Read a cloud written by [`write_cloud_csv`].
pub fn read_cloud_csv<P: AsRef<Path>>(csv_path: P) -> Result<PointCloud> {
    let sidecar = sidecar_path(csv_path.as_ref());
    let meta: CloudSidecar = serde_json::from_reader(std::fs::File::open(sidecar)?)?;
    let mut rdr = csv::Reader::from_path(csv_path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let d = headers.len() - 1;
    let mut rows: Vec<f64> = Vec::new();
    let mut truth: Vec<f64> = Vec::new();
    let mut has_truth = true;
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        for j in 0..d {
            rows.push(rec[j].parse::<f64>().map_err(|e| {
                Error::InvalidParam(format!("bad float in cloud csv: {e}"))
            })?);
        }
        if rec[d].is_empty() {
            has_truth = false;
        } else {
            truth.push(rec[d].parse::<f64>().map_err(|e| {
                Error::InvalidParam(format!("bad float in cloud csv: {e}"))
            })?);
        }
        n += 1;
    }
    let points = DMatrix::from_row_slice(n, d, &rows);
    Ok(PointCloud {
        points,
        true_values: if has_truth && truth.len() == n {
            Some(DVector::from_vec(truth))
        } else {
            None
        },
        holder_beta: meta.holder_beta,
        spec: meta.spec,
    })
}
