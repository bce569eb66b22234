#![allow(dead_code)]

use sdmoe_core::gsahf::{self, AlignWeights, Fc, HyperConvParams, Hypergraph};
use sdmoe_core::losses;
use sdmoe_core::moe::{self, DenseSharedParams, SdMoeConfig, SdMoeLayer, SpecificExpertParams};
use sdmoe_core::numerics::{check_param_gradients, finite_diff_grad, relative_error, ParamId};
use sdmoe_core::{BBox, Graph, ParamStore, Result, RngStream, Tensor, Var};

pub const H: f64 = 1e-5;
pub const UNIT_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
pub const SHAPES_PER_OP: usize = 20;

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Values bounded away from zero so kinks (|x|) are never straddled.
pub fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let mut t = rng.normal_tensor(shape.to_vec(), 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.05));
    t
}

/// Gradient of `Σ op(inputs) ⊙ W` with a fixed random `W`, tape vs central
/// differences, for every input. Returns the worst relative error.
pub fn check_op(inputs: &[Tensor], op: &OpFn, weight_seed: u64) -> Result<f64> {
    let store = ParamStore::new();
    let build = |g: &mut Graph, vals: &[Tensor]| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = op(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let w = RngStream::new(weight_seed).normal_tensor(shape, 1.0);
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok((vars, g.sum(prod)))
    };
    let mut g = Graph::new(&store);
    let (vars, loss) = build(&mut g, inputs)?;
    let bw = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = bw
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let numeric = finite_diff_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = x.clone();
                let mut g = Graph::new(&store);
                let (_, loss) = build(&mut g, &vals)?;
                Ok(g.value(loss).item())
            },
            &inputs[i],
            H,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// One shape draw per call; returns the inputs for the named op.
type Case = (&'static str, Box<dyn Fn(&mut RngStream) -> Vec<Tensor>>, Box<OpFn>);

pub fn op_cases() -> Vec<Case> {
    fn mat(rng: &mut RngStream, r: usize, c: usize) -> Tensor {
        away_from_zero(rng, &[r, c])
    }
    vec![
        (
            "matmul",
            Box::new(|r| {
                let (m, k, n) = (dim(r, 1, 6), dim(r, 1, 6), dim(r, 1, 6));
                vec![mat(r, m, k), mat(r, k, n)]
            }),
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "linear",
            Box::new(|r| {
                let (b, t, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
                vec![away_from_zero(r, &[b, t, k]), mat(r, k, n), away_from_zero(r, &[n])]
            }),
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "add",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b), mat(r, a, b)]
            }),
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b), mat(r, a, b)]
            }),
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b), mat(r, a, b)]
            }),
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "scale",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "mul_scalar",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b), away_from_zero(r, &[1])]
            }),
            Box::new(|g, v| g.mul_scalar(v[0], v[1])),
        ),
        (
            "mul_col",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b), mat(r, a, 1)]
            }),
            Box::new(|g, v| g.mul_col(v[0], v[1])),
        ),
        (
            "silu",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.silu(v[0]))),
        ),
        (
            "sigmoid",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        ),
        (
            "abs",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.abs(v[0]))),
        ),
        (
            "softmax_rows",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 2, 6));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| g.softmax(v[0], 1)),
        ),
        (
            "softmax_cols",
            Box::new(|r| {
                let (a, b) = (dim(r, 2, 6), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| g.softmax(v[0], 0)),
        ),
        (
            "transpose",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "sum",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
        (
            "mean",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.mean(v[0]))),
        ),
        (
            "mean_rows",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.mean_rows(v[0]))),
        ),
        (
            "concat_cols",
            Box::new(|r| {
                let (a, b, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                vec![mat(r, a, b), mat(r, a, c)]
            }),
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "slice_cols",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 3, 6));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| {
                let c = g.shape(v[0])[1];
                g.slice_cols(v[0], 1, c - 2)
            }),
        ),
        (
            "gather_rows",
            Box::new(|r| {
                let (a, b) = (dim(r, 2, 5), dim(r, 1, 4));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| {
                let n = g.shape(v[0])[0];
                g.gather_rows(v[0], &[n - 1, 0, n - 1, 1])
            }),
        ),
        (
            "scatter_rows",
            Box::new(|r| {
                let b = dim(r, 1, 4);
                vec![mat(r, 3, b)]
            }),
            Box::new(|g, v| g.scatter_rows(v[0], &[4, 1, 4], 6)),
        ),
        (
            "pick",
            Box::new(|r| {
                let (a, b) = (dim(r, 2, 5), dim(r, 2, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| g.pick(v[0], &[(1, 1), (0, 0), (1, 1)])),
        ),
        (
            "layer_norm",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 2, 8));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| Ok(g.layer_norm(v[0], 1e-5))),
        ),
        (
            "frob_normalize",
            Box::new(|r| {
                let (a, b) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![mat(r, a, b)]
            }),
            Box::new(|g, v| g.frob_normalize(v[0])),
        ),
        (
            "focal",
            Box::new(|r| {
                let n = dim(r, 2, 9);
                let p = r.uniform_tensor([n, 1], 0.05, 0.95);
                vec![p]
            }),
            Box::new(|g, v| {
                let n = g.shape(v[0])[0];
                let gt = Tensor::new(
                    [n, 1],
                    (0..n)
                        .map(|i| if i == 0 { 1.0 } else { 0.9 / (i as f64 + 1.0) })
                        .collect(),
                )?;
                losses::focal_node(g, v[0], &gt)
            }),
        ),
        (
            "giou",
            Box::new(|r| {
                let b = vec![
                    r.uniform(0.3, 0.7),
                    r.uniform(0.3, 0.7),
                    r.uniform(0.1, 0.4),
                    r.uniform(0.1, 0.4),
                ];
                vec![Tensor::new([1, 4], b).unwrap()]
            }),
            Box::new(|g, v| losses::giou_node(g, v[0], &BBox::new(0.52, 0.47, 0.23, 0.31))),
        ),
        (
            "l1",
            Box::new(|r| {
                let b = vec![
                    r.uniform(0.3, 0.7),
                    r.uniform(0.3, 0.7),
                    r.uniform(0.1, 0.4),
                    r.uniform(0.1, 0.4),
                ];
                vec![Tensor::new([1, 4], b).unwrap()]
            }),
            Box::new(|g, v| losses::l1_node(g, v[0], &BBox::new(0.5001, 0.4999, 0.2501, 0.2499))),
        ),
        (
            "gram_map",
            Box::new(|r| {
                let (t, d) = (dim(r, 2, 6), dim(r, 1, 4));
                vec![mat(r, t, d), mat(r, t, d)]
            }),
            Box::new(|g, v| {
                let basis = gsahf::gram_basis(g, v[0])?;
                gsahf::gram_map(g, v[1], &basis)
            }),
        ),
        (
            "multi_level_fuse",
            Box::new(|r| {
                let (t, d) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![mat(r, t, d), mat(r, t, d), mat(r, 2 * d, d)]
            }),
            Box::new(|g, v| gsahf::multi_level_fuse(g, &[v[0], v[1]], v[2])),
        ),
    ]
}

/// Runs every primitive over `SHAPES_PER_OP` random shape draws.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, Result<f64>)> {
    let mut rng = RngStream::new(seed);
    op_cases()
        .into_iter()
        .map(|(name, gen, op)| {
            let mut worst: Result<f64> = Ok(0.0);
            for i in 0..SHAPES_PER_OP {
                let inputs = gen(&mut rng);
                worst = match (worst, check_op(&inputs, op.as_ref(), seed + i as u64)) {
                    (Ok(w), Ok(e)) => Ok(w.max(e)),
                    (Err(e), _) | (_, Err(e)) => Err(e),
                };
            }
            (name, worst)
        })
        .collect()
}

/// Worst relative error over a parameter set, failing on any error.
pub fn worst_param_error(store: &ParamStore, ids: &[ParamId], f: impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let checks = check_param_gradients(store, ids, H, f)?;
    Ok(checks.iter().map(|c| c.rel_error).fold(0.0, f64::max))
}

/// Replaces every listed parameter by small random values.
pub fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut RngStream) {
    for &id in ids {
        let shape = store.tensor(id).shape().to_vec();
        *store.tensor_mut(id) = rng.normal_tensor(shape, 0.5);
    }
}

/// Module-level checks: adapter, specific expert, dense-shared branch, Gram
/// alignment and hypergraph convolution, each with randomized parameters.
pub fn module_gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use sdmoe_core::numerics::Parameterized;
    let mut rng = RngStream::new(seed);
    let cfg = SdMoeConfig {
        n_experts: 4,
        top_k: 2,
        reduction: 2,
        n_shared: 3,
        model_dim: 6,
    };
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let expert = SpecificExpertParams::init(&mut store, "e", &cfg, &mut rng)?;
    randomize(&mut store, &expert.param_ids(), &mut rng);
    let x = away_from_zero(&mut rng, &[5, 6]);
    out.push((
        "specific_expert",
        worst_param_error(&store, &expert.param_ids(), |g| {
            let t = g.constant(x.clone());
            let y = moe::specific_expert(g, t, &expert)?;
            Ok(g.sum(y))
        })?,
    ));

    let mut store = ParamStore::new();
    let shared = DenseSharedParams::init(&mut store, "s", &cfg, &mut rng)?;
    randomize(&mut store, &shared.param_ids(), &mut rng);
    out.push((
        "dense_shared_moe",
        worst_param_error(&store, &shared.param_ids(), |g| {
            let t = g.constant(x.clone());
            let y = moe::dense_shared_moe(g, t, &shared)?;
            Ok(g.sum(y))
        })?,
    ));

    let mut store = ParamStore::new();
    let layer = SdMoeLayer::init(&mut store, "l", cfg, &mut rng)?;
    randomize(&mut store, &layer.param_ids(), &mut rng);
    let tokens = away_from_zero(&mut rng, &[7, 6]);
    let selection = {
        let mut g = Graph::new(&store);
        let t = g.constant(tokens.clone());
        layer.forward(&mut g, t)?.decision.selected
    };
    out.push((
        "sdmoe_forward",
        worst_param_error(&store, &layer.param_ids(), |g| {
            let t = g.constant(tokens.clone());
            let o = layer.forward_with(g, t, Some(&selection))?;
            let s = g.sum(o.output);
            let b = g.scale(o.balance, 3.0);
            g.add(s, b)
        })?,
    ));

    let mut store = ParamStore::new();
    let fc = Fc::init(&mut store, "fc", 8, 4, &mut rng, true)?;
    let align = AlignWeights::init(&mut store, "a")?;
    let mut ids = fc.param_ids();
    ids.extend(align.param_ids());
    randomize(&mut store, &ids, &mut rng);
    let (kr, kx) = (away_from_zero(&mut rng, &[5, 4]), away_from_zero(&mut rng, &[5, 4]));
    out.push((
        "cross_align",
        worst_param_error(&store, &ids, |g| {
            let a = g.constant(kr.clone());
            let b = g.constant(kx.clone());
            let y = gsahf::cross_align(g, a, b, &align, &fc)?;
            let y = g.silu(y);
            Ok(g.sum(y))
        })?,
    ));

    let mut store = ParamStore::new();
    let hp = HyperConvParams::init(&mut store, "h", 4, &mut rng)?;
    randomize(&mut store, &hp.param_ids(), &mut rng);
    let v = away_from_zero(&mut rng, &[6, 4]);
    let hg = Hypergraph::build(&v, gsahf::auto_epsilon(&v))?;
    out.push((
        "hyperconv",
        worst_param_error(&store, &hp.param_ids(), |g| {
            let t = g.constant(v.clone());
            let y = gsahf::hyperconv(g, t, &hg, &hp)?;
            let y = g.silu(y);
            Ok(g.sum(y))
        })?,
    ));
    Ok(out)
}
