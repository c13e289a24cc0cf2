//! Unweighted radius graphs and the normalized random-walk Laplacian.
//!
//! Vertices are the cloud points; `i ~ j` iff `|x_i - x_j| < h` (strict), so
//! every vertex carries a self-loop and `mu_i >= 1`. The degree measure
//! `nu = mu / mu(V)` makes `L = I - D^-1 A` self-adjoint in `L^2(nu)`, and the
//! scaled operator is `h^-2 L`. Construction goes through a grid-bucket
//! spatial index with cell size `h` (hashed on at most the first three
//! ambient coordinates), which is exact and expectedly sub-quadratic for
//! small `h`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::manifold::PointCloud;
use crate::{Error, Result};

/// Symmetric sparse pattern in CSR form; all stored entries are edges
/// (value 1), the diagonal self-loop included.
#[derive(Debug, Clone)]
pub struct Adjacency {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
}

impl Adjacency {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Radius graph with self-loops, degrees and the normalized degree measure.
#[derive(Debug, Clone)]
pub struct RadiusGraph {
    pub h: f64,
    pub adjacency: Adjacency,
    /// Degrees mu_i = #{ y : |x_i - y| < h }, self included.
    pub mu: Vec<u32>,
    /// nu_i = mu_i / mu(V); sums to one, and nu_i >= 1/N^2.
    pub nu: Vec<f64>,
    /// Vertex -> connected-component id (0-based, ordered by first vertex).
    pub components: Vec<u32>,
    pub n_components: usize,
}

impl RadiusGraph {
    pub fn n_vertices(&self) -> usize {
        self.adjacency.n
    }

    pub fn mu_total(&self) -> f64 {
        self.mu.iter().map(|&m| m as f64).sum()
    }

    pub fn is_connected(&self) -> bool {
        self.n_components == 1
    }
}

const GRID_DIMS: usize = 3;

/// Spatial hash on (at most) the first `GRID_DIMS` coordinates with cell size
/// `cell`. A projection is 1-Lipschitz, so candidate filtering stays exact.
pub(crate) struct GridIndex {
    cell: f64,
    dims: usize,
    buckets: HashMap<[i64; GRID_DIMS], Vec<u32>>,
}

impl GridIndex {
    pub(crate) fn build(points: &nalgebra::DMatrix<f64>, cell: f64) -> Self {
        let dims = points.ncols().min(GRID_DIMS);
        let mut buckets: HashMap<[i64; GRID_DIMS], Vec<u32>> = HashMap::new();
        for i in 0..points.nrows() {
            let key = Self::key_of(points, i, cell, dims);
            buckets.entry(key).or_default().push(i as u32);
        }
        GridIndex { cell, dims, buckets }
    }

    fn key_of(
        points: &nalgebra::DMatrix<f64>,
        i: usize,
        cell: f64,
        dims: usize,
    ) -> [i64; GRID_DIMS] {
        let mut key = [0i64; GRID_DIMS];
        for (d, k) in key.iter_mut().enumerate().take(dims) {
            *k = (points[(i, d)] / cell).floor() as i64;
        }
        key
    }

    /// Visit every point in the 3^dims cells around `i`'s cell.
    pub(crate) fn for_each_candidate<F: FnMut(u32)>(
        &self,
        points: &nalgebra::DMatrix<f64>,
        i: usize,
        mut visit: F,
    ) {
        let center = Self::key_of(points, i, self.cell, self.dims);
        let steps: i64 = 1;
        let mut offset = [0i64; GRID_DIMS];
        self.walk_offsets(&center, &mut offset, 0, steps, &mut visit);
    }

    fn walk_offsets<F: FnMut(u32)>(
        &self,
        center: &[i64; GRID_DIMS],
        offset: &mut [i64; GRID_DIMS],
        depth: usize,
        steps: i64,
        visit: &mut F,
    ) {
        if depth == self.dims {
            let mut key = *center;
            for d in 0..self.dims {
                key[d] += offset[d];
            }
            if let Some(bucket) = self.buckets.get(&key) {
                for &j in bucket {
                    visit(j);
                }
            }
            return;
        }
        for s in -steps..=steps {
            offset[depth] = s;
            self.walk_offsets(center, offset, depth + 1, steps, visit);
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[rb as usize] = ra;
        }
    }
}

/// Build the radius graph on a cloud with connectivity parameter `h`.
///
/// Edge rule is the strict inequality `|x_i - x_j| < h`; self-loops are always
/// present. Disconnected graphs are legal and recorded in `components`.
pub fn build_graph(cloud: &PointCloud, h: f64) -> Result<RadiusGraph> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParam(format!(
            "connectivity parameter h must be positive and finite, got {h}"
        )));
    }
    let n = cloud.len();
    let points = &cloud.points;
    let d = points.ncols();
    let h2 = h * h;

    let grid = GridIndex::build(points, h);
    let mut neighbor_lists: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut uf = UnionFind::new(n);

    for i in 0..n {
        let mut hits: Vec<u32> = Vec::new();
        grid.for_each_candidate(points, i, |j| {
            let j = j as usize;
            let mut dist2 = 0.0;
            for k in 0..d {
                let diff = points[(i, k)] - points[(j, k)];
                dist2 += diff * diff;
                if dist2 >= h2 {
                    return;
                }
            }
            hits.push(j as u32);
        });
        hits.sort_unstable();
        for &j in &hits {
            uf.union(i as u32, j);
        }
        neighbor_lists[i] = hits;
    }

    let mut indptr = Vec::with_capacity(n + 1);
    indptr.push(0usize);
    let mut indices = Vec::new();
    let mut mu = Vec::with_capacity(n);
    for list in &neighbor_lists {
        indices.extend_from_slice(list);
        indptr.push(indices.len());
        mu.push(list.len() as u32);
    }

    let mu_total: f64 = mu.iter().map(|&m| m as f64).sum();
    let nu: Vec<f64> = mu.iter().map(|&m| m as f64 / mu_total).collect();

    let mut component_of_root: HashMap<u32, u32> = HashMap::new();
    let mut components = vec![0u32; n];
    let mut next = 0u32;
    for i in 0..n {
        let root = uf.find(i as u32);
        let id = *component_of_root.entry(root).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        components[i] = id;
    }

    Ok(RadiusGraph {
        h,
        adjacency: Adjacency { n, indptr, indices },
        mu,
        nu,
        components,
        n_components: next as usize,
    })
}

/// The scaled normalized Laplacian `h^-2 (I - D^-1 A)` as a matrix-free
/// operator, plus its symmetrization used by the eigensolver.
#[derive(Debug, Clone)]
pub struct LaplacianOperator {
    pub graph: RadiusGraph,
    /// h^-2.
    pub scale: f64,
    inv_mu: Vec<f64>,
    inv_sqrt_mu: Vec<f64>,
}

/// Form the Laplacian operator of a graph.
pub fn laplacian(graph: RadiusGraph) -> LaplacianOperator {
    let inv_mu: Vec<f64> = graph.mu.iter().map(|&m| 1.0 / m as f64).collect();
    let inv_sqrt_mu: Vec<f64> = graph.mu.iter().map(|&m| 1.0 / (m as f64).sqrt()).collect();
    let scale = 1.0 / (graph.h * graph.h);
    LaplacianOperator {
        graph,
        scale,
        inv_mu,
        inv_sqrt_mu,
    }
}

impl LaplacianOperator {
    pub fn n(&self) -> usize {
        self.graph.n_vertices()
    }

    /// Apply the operator: `(Lf)(x) = h^-2 (1/mu_x) sum_{y ~ x} (f(x) - f(y))`.
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        self.apply_into(f.as_slice(), out.as_mut_slice());
        out
    }

    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        let adj = &self.graph.adjacency;
        for i in 0..adj.n {
            let mut acc = 0.0;
            for &j in adj.neighbors(i) {
                acc += f[j as usize];
            }
            out[i] = self.scale * (f[i] - self.inv_mu[i] * acc);
        }
    }

    /// Apply the symmetric conjugate `S = D_nu^{1/2} L D_nu^{-1/2}
    /// = h^-2 (I - M)` with `M_ij = A_ij / sqrt(mu_i mu_j)`. Same spectrum;
    /// eigenvectors map back through division by sqrt(nu).
    pub fn apply_sym_into(&self, v: &[f64], out: &mut [f64]) {
        let adj = &self.graph.adjacency;
        for i in 0..adj.n {
            let mut acc = 0.0;
            for &j in adj.neighbors(i) {
                acc += v[j as usize] * self.inv_sqrt_mu[j as usize];
            }
            out[i] = self.scale * (v[i] - self.inv_sqrt_mu[i] * acc);
        }
    }

    /// Dense matrix of the symmetric conjugate (for the small-N eigensolver
    /// path and for oracles).
    pub fn sym_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let adj = &self.graph.adjacency;
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += self.scale;
            for &j in adj.neighbors(i) {
                m[(i, j as usize)] -=
                    self.scale * self.inv_sqrt_mu[i] * self.inv_sqrt_mu[j as usize];
            }
        }
        m
    }

    /// Dense matrix of the operator itself.
    pub fn dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let adj = &self.graph.adjacency;
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += self.scale;
            for &j in adj.neighbors(i) {
                m[(i, j as usize)] -= self.scale * self.inv_mu[i];
            }
        }
        m
    }
}

/// Degree-weighted inner product `<f|g> = sum_y f(y) g(y) nu_y`.
pub fn inner_nu(graph: &RadiusGraph, f: &[f64], g: &[f64]) -> Result<f64> {
    let n = graph.n_vertices();
    if f.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: f.len(),
        });
    }
    if g.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: g.len(),
        });
    }
    Ok(f.iter()
        .zip(g)
        .zip(&graph.nu)
        .map(|((a, b), w)| a * b * w)
        .sum())
}

/// Norm induced by [`inner_nu`].
pub fn norm_nu(graph: &RadiusGraph, f: &[f64]) -> Result<f64> {
    Ok(inner_nu(graph, f, f)?.max(0.0).sqrt())
}

/// Sup norm over vertices.
pub fn norm_inf(f: &[f64]) -> f64 {
    f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Dirichlet form `(1/(2 mu(V))) sum_{x ~ y} (f(x)-f(y))(g(x)-g(y))`, summing
/// over ordered adjacent pairs. Equals `<f | L g>_nu` for the unscaled
/// Laplacian.
pub fn dirichlet_form(graph: &RadiusGraph, f: &[f64], g: &[f64]) -> Result<f64> {
    let n = graph.n_vertices();
    if f.len() != n || g.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: if f.len() != n { f.len() } else { g.len() },
        });
    }
    let mut acc = 0.0;
    for i in 0..n {
        for &j in graph.adjacency.neighbors(i) {
            let j = j as usize;
            acc += (f[i] - f[j]) * (g[i] - g[j]);
        }
    }
    Ok(acc / (2.0 * graph.mu_total()))
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphMeta {
    n: usize,
    h: f64,
    mu: Vec<u32>,
    nu: Vec<f64>,
}

/// Export edges as `i j` lines (one line per unordered pair, self-loops
/// included) plus a JSON metadata file `{N, h, mu, nu}`.
pub fn write_graph<P: AsRef<Path>>(graph: &RadiusGraph, edges_path: P, meta_path: P) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(edges_path)?);
    for i in 0..graph.n_vertices() {
        for &j in graph.adjacency.neighbors(i) {
            if j as usize >= i {
                writeln!(f, "{} {}", i, j)?;
            }
        }
    }
    f.flush()?;
    let meta = GraphMeta {
        n: graph.n_vertices(),
        h: graph.h,
        mu: graph.mu.clone(),
        nu: graph.nu.clone(),
    };
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{sample_cloud, Density, ManifoldKind, ManifoldSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn cloud_from_points(points: DMatrix<f64>) -> PointCloud {
        PointCloud {
            points,
            true_values: None,
            holder_beta: None,
            spec: ManifoldSpec::new(ManifoldKind::Interval, 1, Density::Uniform, 0),
        }
    }

    fn line_cloud() -> PointCloud {
        cloud_from_points(DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 2.0]))
    }

    #[test]
    fn hand_enumerated_line_graph() {
        let g = build_graph(&line_cloud(), 1.0).unwrap();
        assert_eq!(g.mu, vec![2, 2, 1]);
        assert_abs_diff_eq!(g.nu[0], 0.4);
        assert_abs_diff_eq!(g.nu[1], 0.4);
        assert_abs_diff_eq!(g.nu[2], 0.2);
        assert_eq!(g.n_components, 2);
        assert_eq!(g.components[0], g.components[1]);
        assert_ne!(g.components[0], g.components[2]);
    }

    #[test]
    fn huge_h_gives_complete_graph() {
        let g = build_graph(&line_cloud(), 10.0).unwrap();
        assert_eq!(g.mu, vec![3, 3, 3]);
        assert!(g.is_connected());
    }

    #[test]
    fn single_vertex_graph() {
        let c = cloud_from_points(DMatrix::from_row_slice(1, 1, &[0.3]));
        let g = build_graph(&c, 0.1).unwrap();
        assert_eq!(g.mu, vec![1]);
        assert_eq!(g.nu, vec![1.0]);
        assert!(g.is_connected());
    }

    #[test]
    fn self_loops_and_strictness() {
        // points exactly h apart are NOT adjacent
        let c = cloud_from_points(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        let g = build_graph(&c, 1.0).unwrap();
        assert_eq!(g.mu, vec![1, 1]);
        for i in 0..2 {
            assert!(g.adjacency.neighbors(i).contains(&(i as u32)));
        }
    }

    #[test]
    fn grid_index_matches_brute_force() {
        let spec = ManifoldSpec::new(ManifoldKind::Sphere2, 3, Density::Uniform, 8);
        let cloud = sample_cloud(&spec, 300).unwrap();
        let h = 0.4;
        let g = build_graph(&cloud, h).unwrap();
        for i in 0..cloud.len() {
            let mut brute: Vec<u32> = Vec::new();
            for j in 0..cloud.len() {
                let dist = (cloud.points.row(i) - cloud.points.row(j)).norm();
                if dist < h {
                    brute.push(j as u32);
                }
            }
            assert_eq!(g.adjacency.neighbors(i), brute.as_slice(), "vertex {i}");
        }
    }

    #[test]
    fn laplacian_matches_pointwise_formula() {
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, 3);
        let cloud = sample_cloud(&spec, 80).unwrap();
        let g = build_graph(&cloud, 0.7).unwrap();
        let op = laplacian(g);
        let f = DVector::from_fn(80, |i, _| (i as f64 * 0.37).sin());
        let lf = op.apply(&f);
        for x in 0..80 {
            let mut acc = 0.0;
            for &y in op.graph.adjacency.neighbors(x) {
                acc += f[x] - f[y as usize];
            }
            let expected = acc / (op.graph.mu[x] as f64 * op.graph.h * op.graph.h);
            assert_abs_diff_eq!(lf[x], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn laplacian_kills_constants_and_isolated_vertices() {
        let c = cloud_from_points(DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 0.2, 5.0]));
        let op = laplacian(build_graph(&c, 0.15).unwrap());
        let ones = DVector::from_element(4, 3.25);
        let lf = op.apply(&ones);
        for x in 0..4 {
            assert_abs_diff_eq!(lf[x], 0.0);
        }
        // isolated vertex: only neighbor is itself
        let f = DVector::from_row_slice(&[1.0, -2.0, 0.5, 7.0]);
        assert_abs_diff_eq!(op.apply(&f)[3], 0.0);
    }

    #[test]
    fn complete_graph_laplacian_value() {
        let c = cloud_from_points(DMatrix::from_row_slice(3, 1, &[0.0, 0.1, 0.2]));
        let op = laplacian(build_graph(&c, 1.0).unwrap());
        let f = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let lf = op.apply(&f);
        assert_abs_diff_eq!(lf[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lf[1], -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lf[2], -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn inner_nu_examples() {
        let g = build_graph(&line_cloud(), 1.0).unwrap();
        let ones = [1.0, 1.0, 1.0];
        assert_abs_diff_eq!(inner_nu(&g, &ones, &ones).unwrap(), 1.0, epsilon = 1e-15);
        let f = [1.0, 0.0, 0.0];
        let gvec = [1.0, 1.0, 0.0];
        assert_abs_diff_eq!(inner_nu(&g, &f, &gvec).unwrap(), 0.4, epsilon = 1e-15);
        let zero = [0.0, 0.0, 0.0];
        assert_abs_diff_eq!(inner_nu(&g, &f, &zero).unwrap(), 0.0);
        assert!(inner_nu(&g, &[1.0], &ones).is_err());
    }

    #[test]
    fn dirichlet_form_two_routes() {
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, 9);
        let cloud = sample_cloud(&spec, 60).unwrap();
        let g = build_graph(&cloud, 0.8).unwrap();
        let op = laplacian(g);
        let f: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let gv: Vec<f64> = (0..60).map(|i| (i as f64 * 0.11).cos()).collect();

        let direct = dirichlet_form(&op.graph, &f, &gv).unwrap();
        // <f | L g>_nu with the unscaled Laplacian
        let lg = op.apply(&DVector::from_column_slice(&gv));
        let unscaled: Vec<f64> = lg.iter().map(|v| v / op.scale).collect();
        let via_inner = inner_nu(&op.graph, &f, &unscaled).unwrap();
        assert!(
            (direct - via_inner).abs() <= 1e-10 * direct.abs().max(1.0),
            "{direct} vs {via_inner}"
        );

        // constant f has zero energy; f = g is nonnegative
        let c = [2.0; 60];
        assert_abs_diff_eq!(dirichlet_form(&op.graph, &c, &gv).unwrap(), 0.0, epsilon = 1e-12);
        assert!(dirichlet_form(&op.graph, &f, &f).unwrap() >= 0.0);
    }

    #[test]
    fn nu_invariants_and_row_stochastic_precursor() {
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 3, Density::Uniform, 13);
        let cloud = sample_cloud(&spec, 120).unwrap();
        let g = build_graph(&cloud, 0.5).unwrap();
        let n = g.n_vertices();
        let total: f64 = g.nu.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        for i in 0..n {
            assert!(g.nu[i] >= 1.0 / (n as f64 * n as f64));
            assert!(g.mu[i] >= 1);
        }
        // D^-1 A row sums are 1, and nu-symmetry nu_x L_xy = nu_y L_yx
        let op = laplacian(g);
        let dense = op.dense();
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| dense[(i, j)]).sum();
            assert_abs_diff_eq!(row_sum, 0.0, epsilon = 1e-10);
            for j in 0..n {
                assert_abs_diff_eq!(
                    op.graph.nu[i] * dense[(i, j)],
                    op.graph.nu[j] * dense[(j, i)],
                    epsilon = 1e-12
                );
                if i != j {
                    assert!(-dense[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn sup_operator_norm_bound() {
        // |h^2 L f|_inf <= 2 |f|_inf
        let spec = ManifoldSpec::new(ManifoldKind::Sphere2, 3, Density::Uniform, 21);
        let cloud = sample_cloud(&spec, 150).unwrap();
        let op = laplacian(build_graph(&cloud, 0.6).unwrap());
        let mut rng = crate::rng::rng_from_seed(5);
        for _ in 0..20 {
            let f = DVector::from_fn(150, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            let lf = op.apply(&f);
            let lhs = norm_inf(lf.as_slice()) / op.scale;
            assert!(lhs <= 2.0 * norm_inf(f.as_slice()) + 1e-12);
        }
    }

    #[test]
    fn empirical_volume_regularity_on_circle() {
        // counts mu_i^(r) / (N r^d) stay within a modest max/min ratio over a
        // dyadic r-grid on a dense uniform circle cloud
        let spec = ManifoldSpec::new(ManifoldKind::Circle, 2, Density::Uniform, 31);
        let n = 2000;
        let cloud = sample_cloud(&spec, n).unwrap();
        let h_minus = 0.04;
        let mut r = h_minus;
        while r <= 0.5 {
            let g = build_graph(&cloud, r).unwrap();
            let normalized: Vec<f64> = g.mu.iter().map(|&m| m as f64 / (n as f64 * r)).collect();
            let max = normalized.iter().cloned().fold(f64::MIN, f64::max);
            let min = normalized.iter().cloned().fold(f64::MAX, f64::min);
            assert!(
                max / min < 10.0,
                "volume regularity ratio {} at r={r}",
                max / min
            );
            r *= 2.0;
        }
    }

    #[test]
    fn graph_export_format() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_graph(&line_cloud(), 1.0).unwrap();
        let edges = dir.path().join("edges.txt");
        let meta = dir.path().join("meta.json");
        write_graph(&g, &edges, &meta).unwrap();
        let text = std::fs::read_to_string(&edges).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["0 0", "0 1", "1 1", "2 2"]);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
        assert_eq!(meta["n"], 3);
        assert_eq!(meta["mu"][0], 2);
    }
}
