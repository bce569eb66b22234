//! Gram-based semantic alignment followed by hypergraph fusion.
//!
//! Keys of each modality are mapped into the other modality's space through
//! the Frobenius-normalized Gram matrix `ĝ = KᵀK / ‖KᵀK‖_F`, blended back with
//! a learnable scalar, concatenated and projected. The fused tokens then become
//! vertices of an ε-ball hypergraph and pass through a residual hypergraph
//! convolution.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Parameterized, RngStream, Tensor, Var};

/// Fully connected layer handles.
#[derive(Clone, Debug)]
pub struct Fc {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Fc {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngStream,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_weight(format!("{prefix}.w"), d_in, d_out, rng, true)?;
        let b = if bias {
            Some(store.add_zeros(format!("{prefix}.b"), [d_out], true)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_zeros(format!("{prefix}.w"), [d_in, d_out], true)?,
            b: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

impl Parameterized for Fc {
    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Concatenates `L` equally shaped levels along features and projects
/// `[T, L·D] -> [T, D]` with `proj`.
pub fn multi_level_fuse(g: &mut Graph, levels: &[Var], proj: Var) -> Result<Var> {
    let first = *levels
        .first()
        .ok_or_else(|| Error::contract("multi-level fusion needs at least one level"))?;
    let shape = g.shape(first).to_vec();
    if let Some(&bad) = levels.iter().find(|&&l| g.shape(l) != shape.as_slice()) {
        return Err(Error::Contract(format!(
            "level shapes differ: {shape:?} vs {:?}",
            g.shape(bad)
        )));
    }
    let cat = g.concat_cols(levels)?;
    g.linear(cat, proj, None)
}

/// Raw Gram matrix of a key set with its Frobenius norm.
#[derive(Clone, Debug, PartialEq)]
pub struct GramBasis {
    pub gram: Tensor,
    pub norm: f64,
}

impl GramBasis {
    pub fn from_keys(k: &Tensor) -> Result<Self> {
        let gram = k.transpose()?.matmul(k)?;
        let norm = gram.frobenius_norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero Gram matrix".into()));
        }
        Ok(Self { gram, norm })
    }

    pub fn normalized(&self) -> Tensor {
        self.gram.scale(1.0 / self.norm)
    }
}

/// Normalized Gram basis recorded on the tape.
pub struct GramNode {
    pub normalized: Var,
    pub norm: f64,
}

pub fn gram_basis(g: &mut Graph, k: Var) -> Result<GramNode> {
    let kt = g.transpose(k)?;
    let gram = g.matmul(kt, k)?;
    let norm = g.value(gram).frobenius_norm();
    let normalized = g.frob_normalize(gram)?;
    Ok(GramNode { normalized, norm })
}

/// Maps source keys into the basis' modality: `k_src · ĝ`.
pub fn gram_map(g: &mut Graph, k_src: Var, basis: &GramNode) -> Result<Var> {
    g.matmul(k_src, basis.normalized)
}

/// `k_self + w · k_mapped` with scalar `w`.
pub fn align_fuse(g: &mut Graph, k_self: Var, k_mapped: Var, w: Var) -> Result<Var> {
    let scaled = g.mul_scalar(k_mapped, w)?;
    g.add(k_self, scaled)
}

/// Learnable scalar blend weights for the two mapping directions.
#[derive(Clone, Debug)]
pub struct AlignWeights {
    pub w_r: ParamId,
    pub w_x: ParamId,
}

impl AlignWeights {
    pub fn init(store: &mut ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_r: store.add_zeros(format!("{prefix}.w_r"), [1], true)?,
            w_x: store.add_zeros(format!("{prefix}.w_x"), [1], true)?,
        })
    }
}

impl Parameterized for AlignWeights {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_r, self.w_x]
    }
}

/// Two-way Gram alignment, then `fc(concat(F_X, F_R))`.
pub fn cross_align(g: &mut Graph, k_r: Var, k_x: Var, weights: &AlignWeights, fc: &Fc) -> Result<Var> {
    if g.shape(k_r) != g.shape(k_x) {
        return Err(Error::dim("cross_align", g.shape(k_r), g.shape(k_x)));
    }
    let basis_r = gram_basis(g, k_r)?;
    let basis_x = gram_basis(g, k_x)?;
    let x_to_r = gram_map(g, k_x, &basis_r)?;
    let r_to_x = gram_map(g, k_r, &basis_x)?;
    let w_x = g.param(weights.w_x);
    let w_r = g.param(weights.w_r);
    let f_x = align_fuse(g, k_x, x_to_r, w_x)?;
    let f_r = align_fuse(g, k_r, r_to_x, w_r)?;
    let cat = g.concat_cols(&[f_x, f_r])?;
    fc.forward(g, cat)
}

/// How the ball radius is chosen for each vertex set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonMode {
    /// Half the mean pairwise distance of the current vertices.
    Auto,
    Fixed(f64),
}

impl EpsilonMode {
    pub fn resolve(&self, x: &Tensor) -> f64 {
        match *self {
            EpsilonMode::Auto => auto_epsilon(x),
            EpsilonMode::Fixed(e) => e,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `0.5 ×` mean pairwise Euclidean distance. Falls back to 1 when all vertices
/// coincide, which yields the complete hypergraph.
pub fn auto_epsilon(x: &Tensor) -> f64 {
    let v = x.rows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..v {
        for j in i + 1..v {
            total += sq_dist(x.row(i), x.row(j)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 || total == 0.0 {
        return 1.0;
    }
    0.5 * total / pairs as f64
}

/// ε-ball hypergraph with one hyperedge per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    n: usize,
    /// Row-major `[|V|, |E|]`; `incidence[i * n + e]` is true iff vertex `i` lies in edge `e`.
    incidence: Vec<bool>,
    pub d_v: Vec<usize>,
    pub d_e: Vec<usize>,
    pub epsilon: f64,
}

impl Hypergraph {
    /// Hyperedge `e` holds every `u` with `‖x_u − x_e‖₂ < ε`.
    pub fn build(x: &Tensor, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
        }
        if x.rank() != 2 {
            return Err(Error::contract(format!(
                "hypergraph vertices must be [V, D], got {:?}",
                x.shape()
            )));
        }
        let n = x.rows();
        let eps2 = epsilon * epsilon;
        let mut incidence = vec![false; n * n];
        for i in 0..n {
            incidence[i * n + i] = true;
            for j in i + 1..n {
                let inside = sq_dist(x.row(i), x.row(j)) < eps2;
                incidence[i * n + j] = inside;
                incidence[j * n + i] = inside;
            }
        }
        let d_v = (0..n)
            .map(|i| (0..n).filter(|&e| incidence[i * n + e]).count())
            .collect();
        let d_e = (0..n)
            .map(|e| (0..n).filter(|&i| incidence[i * n + e]).count())
            .collect();
        Ok(Self {
            n,
            incidence,
            d_v,
            d_e,
            epsilon,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.n
    }

    pub fn contains(&self, vertex: usize, edge: usize) -> bool {
        self.incidence[vertex * self.n + edge]
    }

    pub fn incidence(&self) -> Tensor {
        let data = self.incidence.iter().map(|&b| f64::from(u8::from(b))).collect();
        Tensor::new([self.n, self.n], data).expect("square incidence")
    }

    /// `D_v⁻¹ H D_e⁻¹ Hᵀ`, a row-stochastic `[|V|, |V|]` matrix.
    pub fn propagation(&self) -> Result<Tensor> {
        let n = self.n;
        if self.d_v.contains(&0) || self.d_e.contains(&0) {
            return Err(Error::Numeric("hypergraph has a zero degree".into()));
        }
        let mut p = Tensor::zeros([n, n]);
        let out = p.data_mut();
        for i in 0..n {
            for e in (0..n).filter(|&e| self.contains(i, e)) {
                let w = 1.0 / (self.d_v[i] * self.d_e[e]) as f64;
                for j in (0..n).filter(|&j| self.contains(j, e)) {
                    out[i * n + j] += w;
                }
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct HyperConvParams {
    pub theta1: ParamId,
    pub theta2: ParamId,
}

impl HyperConvParams {
    /// `Θ₁` uniform, `Θ₂` zero so the layer starts as the identity.
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            theta1: store.add_weight(format!("{prefix}.theta1"), d, d, rng, true)?,
            theta2: store.add_zeros(format!("{prefix}.theta2"), [d, d], true)?,
        })
    }
}

impl Parameterized for HyperConvParams {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.theta1, self.theta2]
    }
}

/// `x + (P · x · Θ₁) · Θ₂` with `P = D_v⁻¹ H D_e⁻¹ Hᵀ` held constant.
pub fn hyperconv(g: &mut Graph, x: Var, hg: &Hypergraph, p: &HyperConvParams) -> Result<Var> {
    if g.value(x).rows() != hg.n_vertices() {
        return Err(Error::dim("hyperconv", g.shape(x), &[hg.n_vertices()]));
    }
    let prop = g.constant(hg.propagation()?);
    let msg = g.matmul(prop, x)?;
    let t1 = g.param(p.theta1);
    let t2 = g.param(p.theta2);
    let msg = g.matmul(msg, t1)?;
    let msg = g.matmul(msg, t2)?;
    g.add(x, msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn three_point_ball_example() {
        let x = points(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 0.0]]);
        let hg = Hypergraph::build(&x, 2.0).unwrap();
        let expected = points(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(hg.incidence(), expected);
        assert_eq!(hg.d_v, vec![2, 2, 1]);
        assert_eq!(hg.d_e, vec![2, 2, 1]);
    }

    #[test]
    fn strict_inequality_at_the_ball_boundary() {
        let x = points(&[vec![0.0], vec![2.0]]);
        let hg = Hypergraph::build(&x, 2.0).unwrap();
        assert_eq!(hg.incidence(), Tensor::eye(2));
    }

    #[test]
    fn isolated_and_complete_extremes() {
        let x = points(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0], vec![3.0, 4.0]]);
        let tiny = Hypergraph::build(&x, 0.5).unwrap();
        assert_eq!(tiny.incidence(), Tensor::eye(4));
        assert_eq!(tiny.d_v, vec![1; 4]);
        let full = Hypergraph::build(&x, 100.0).unwrap();
        assert!(full.incidence().data().iter().all(|&v| v == 1.0));
        assert_eq!(full.d_e, vec![4; 4]);
    }

    #[test]
    fn epsilon_must_be_positive() {
        let x = points(&[vec![0.0]]);
        assert!(matches!(Hypergraph::build(&x, 0.0), Err(Error::Contract(_))));
        assert!(Hypergraph::build(&x, -1.0).is_err());
    }

    #[test]
    fn gram_hand_oracle_and_identity() {
        let b = GramBasis::from_keys(&points(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(b.gram, points(&[vec![10.0, 14.0], vec![14.0, 20.0]]));
        let i = GramBasis::from_keys(&Tensor::eye(3)).unwrap();
        assert_eq!(i.gram, Tensor::eye(3));
        assert!((i.norm - 3f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            GramBasis::from_keys(&Tensor::zeros([2, 2])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn gram_map_isotropic_basis_scales_input() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let k = g.constant(Tensor::eye(2).scale(2f64.sqrt()));
        let basis = gram_basis(&mut g, k).unwrap();
        let src_t = points(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![1.0, 1.0]]);
        let src = g.constant(src_t.clone());
        let mapped = gram_map(&mut g, src, &basis).unwrap();
        // ĝ = I/√2
        let expected = src_t.scale(1.0 / 2f64.sqrt());
        assert!(g.value(mapped).max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn align_fuse_cases() {
        let mut store = ParamStore::new();
        let w0 = store.add_zeros("w0", [1], true).unwrap();
        let w1 = store.add("w1", Tensor::scalar(1.0), true).unwrap();
        let mut g = Graph::new(&store);
        let k_t = points(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let k = g.constant(k_t.clone());
        let neg = g.constant(k_t.scale(-1.0));
        let w0v = g.param(w0);
        let w1v = g.param(w1);
        let same = align_fuse(&mut g, k, neg, w0v).unwrap();
        assert_eq!(g.value(same), &k_t);
        let zero = align_fuse(&mut g, k, neg, w1v).unwrap();
        assert_eq!(g.value(zero).max_abs(), 0.0);
    }

    #[test]
    fn multi_level_fuse_selectors_and_errors() {
        let mut store = ParamStore::new();
        let sel = Tensor::concat_cols(&[&Tensor::eye(2), &Tensor::zeros([2, 2])])
            .unwrap()
            .transpose()
            .unwrap();
        let p1 = store.add("p1", Tensor::eye(2), true).unwrap();
        let p2 = store.add("p2", sel, true).unwrap();
        let mut g = Graph::new(&store);
        let a_t = points(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let a = g.constant(a_t.clone());
        let b = g.constant(points(&[vec![9.0, 9.0], vec![9.0, 9.0]]));
        let p1v = g.param(p1);
        let p2v = g.param(p2);
        let one = multi_level_fuse(&mut g, &[a], p1v).unwrap();
        assert_eq!(g.value(one), &a_t);
        let first = multi_level_fuse(&mut g, &[a, b], p2v).unwrap();
        assert_eq!(g.value(first), &a_t);

        assert!(multi_level_fuse(&mut g, &[], p1v).is_err());
        let c = g.constant(Tensor::zeros([3, 2]));
        assert!(multi_level_fuse(&mut g, &[a, c], p2v).is_err());
    }

    #[test]
    fn hyperconv_residual_and_self_loop() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        let hp = HyperConvParams::init(&mut store, "h", 3, &mut rng).unwrap();
        let x_t = rng.normal_tensor([5, 3], 1.0);
        let hg = Hypergraph::build(&x_t, auto_epsilon(&x_t)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(x_t.clone());
        let y = hyperconv(&mut g, x, &hg, &hp).unwrap();
        assert_eq!(g.value(y), &x_t);

        let mut store = ParamStore::new();
        let hp = HyperConvParams {
            theta1: store.add("t1", Tensor::eye(3), true).unwrap(),
            theta2: store.add("t2", Tensor::eye(3), true).unwrap(),
        };
        let single = Tensor::new([1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let hg = Hypergraph::build(&single, 1.0).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(single.clone());
        let y = hyperconv(&mut g, x, &hg, &hp).unwrap();
        assert_eq!(g.value(y), &single.scale(2.0));
    }

    #[test]
    fn auto_epsilon_degenerate_fallback() {
        assert_eq!(auto_epsilon(&Tensor::zeros([4, 2])), 1.0);
        let x = points(&[vec![0.0], vec![2.0]]);
        assert_eq!(auto_epsilon(&x), 1.0);
        let x = points(&[vec![0.0], vec![4.0]]);
        assert_eq!(EpsilonMode::Auto.resolve(&x), 2.0);
        assert_eq!(EpsilonMode::Fixed(0.3).resolve(&x), 0.3);
    }
}
