//! Two-modality tracker: frozen transformer backbone shared by both
//! modalities, optional adapters and fusion modules, and a centre/box head.

use super::config::RunConfig;
use super::data::{patchify, Sample};
use crate::error::{Error, Result};
use crate::gsahf::{cross_align, hyperconv, multi_level_fuse, AlignWeights, Fc, HyperConvParams, Hypergraph};
use crate::losses::{focal_node, giou_node, l1_node, total_node, BBox};
use crate::moe::SdMoeLayer;
use crate::numerics::{Graph, ParamId, ParamStore, Parameterized, RngStream, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Standard deviation, in grid cells, of the centre heatmap target.
const HEATMAP_SIGMA: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Block {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_in: ParamId,
    pub mlp_in_b: ParamId,
    pub mlp_out: ParamId,
    pub mlp_out_b: ParamId,
}

/// Pretrained-backbone stand-in. All of its parameters are frozen.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl Backbone {
    fn init(store: &mut ParamStore, cfg: &RunConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.dims.model_dim;
        let hidden = d * cfg.dims.mlp_ratio;
        let patch_w = store.add_weight("backbone.patch.w", cfg.dims.patch_dim(), d, rng, false)?;
        let patch_b = store.add("backbone.patch.b", rng.uniform_tensor([d], -0.1, 0.1), false)?;
        let pos = store.add(
            "backbone.pos",
            rng.uniform_tensor([cfg.dims.tokens_per_modality(), d], -0.5, 0.5),
            false,
        )?;
        let blocks = (0..cfg.dims.depth)
            .map(|i| {
                let p = format!("backbone.block{i}");
                Ok(Block {
                    wq: store.add_weight(format!("{p}.wq"), d, d, rng, false)?,
                    wk: store.add_weight(format!("{p}.wk"), d, d, rng, false)?,
                    wv: store.add_weight(format!("{p}.wv"), d, d, rng, false)?,
                    wo: store.add_weight(format!("{p}.wo"), d, d, rng, false)?,
                    mlp_in: store.add_weight(format!("{p}.mlp_in"), d, hidden, rng, false)?,
                    mlp_in_b: store.add_zeros(format!("{p}.mlp_in_b"), [hidden], false)?,
                    mlp_out: store.add_weight(format!("{p}.mlp_out"), hidden, d, rng, false)?,
                    mlp_out_b: store.add_zeros(format!("{p}.mlp_out_b"), [d], false)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_w,
            patch_b,
            pos,
            blocks,
        })
    }

    fn embed(&self, g: &mut Graph, patches: &Tensor) -> Result<Var> {
        let x = g.constant(patches.clone());
        let (w, b, pos) = (g.param(self.patch_w), g.param(self.patch_b), g.param(self.pos));
        let x = g.linear(x, w, Some(b))?;
        g.add(x, pos)
    }

    fn attention(&self, g: &mut Graph, blk: &Block, x: Var, heads: usize) -> Result<Var> {
        let d = g.value(x).cols();
        let dh = d / heads;
        let (wq, wk, wv, wo) = (g.param(blk.wq), g.param(blk.wk), g.param(blk.wv), g.param(blk.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        g.matmul(cat, wo)
    }

    /// Pre-norm block: attention then MLP, both residual.
    fn block(&self, g: &mut Graph, blk: &Block, x: Var, heads: usize) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let a = self.attention(g, blk, n, heads)?;
        let x = g.add(x, a)?;
        let n = g.layer_norm(x, LN_EPS);
        let (w1, b1, w2, b2) = (
            g.param(blk.mlp_in),
            g.param(blk.mlp_in_b),
            g.param(blk.mlp_out),
            g.param(blk.mlp_out_b),
        );
        let h = g.linear(n, w1, Some(b1))?;
        let h = g.silu(h);
        let m = g.linear(h, w2, Some(b2))?;
        g.add(x, m)
    }
}

impl Parameterized for Backbone {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos];
        for b in &self.blocks {
            ids.extend([b.wq, b.wk, b.wv, b.wo, b.mlp_in, b.mlp_in_b, b.mlp_out, b.mlp_out_b]);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Fc,
    pub cls: Fc,
    pub size: Fc,
}

impl Parameterized for Head {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.param_ids();
        ids.extend(self.cls.param_ids());
        ids.extend(self.size.param_ids());
        ids
    }
}

/// Per-modality pair of layers, index 0 for R and 1 for X.
pub type PerModality<T> = [T; 2];

#[derive(Clone, Debug)]
pub struct TrackerModel {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub adapters: Vec<SdMoeLayer>,
    pub mff: Option<PerModality<Fc>>,
    pub keys: Option<PerModality<Fc>>,
    pub align: Option<AlignWeights>,
    pub fusion: Fc,
    pub hyper: Option<HyperConvParams>,
    pub head: Head,
    grid: Tensor,
}

/// Discrete choices made during a forward pass: top-K selections per adapter
/// layer and the hypergraph. Replaying them pins a perturbed pass to the same
/// smooth piece of the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Structure {
    pub routing: Vec<Vec<Vec<usize>>>,
    pub hypergraph: Option<Hypergraph>,
}

/// Model-ready view of one sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub patches_r: Tensor,
    pub patches_x: Tensor,
    pub heatmap: Tensor,
    pub gt: BBox,
}

pub struct ForwardPass {
    pub loss: Var,
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    pub eb: Var,
    pub pred: Var,
    pub usage: Vec<usize>,
    pub expert_evaluations: usize,
    pub structure: Structure,
}

impl TrackerModel {
    /// Parameters are drawn from independent streams per component, so a
    /// toggle never changes the initial values of the other components.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims.model_dim;
        let root = RngStream::new(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, cfg, &mut root.fork(1))?;

        let mut rng = root.fork(2);
        let fusion = Fc::init(&mut store, "fusion", 2 * d, d, &mut rng, true)?;
        let head = Head {
            hidden: Fc::init(&mut store, "head.hidden", d, cfg.dims.head_hidden, &mut rng, true)?,
            cls: Fc::init(&mut store, "head.cls", cfg.dims.head_hidden, 1, &mut rng, true)?,
            size: Fc::init(&mut store, "head.size", cfg.dims.head_hidden, 2, &mut rng, true)?,
        };

        let mut rng = root.fork(3);
        let adapters = if cfg.toggles.sdmoe {
            (0..cfg.dims.depth)
                .map(|i| SdMoeLayer::init(&mut store, &format!("sdmoe{i}"), cfg.moe, &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mff = if cfg.toggles.mff {
            let l = cfg.gsahf.level_taps.len();
            Some([
                Fc::zeros(&mut store, "mff.r", l * d, d)?,
                Fc::zeros(&mut store, "mff.x", l * d, d)?,
            ])
        } else {
            None
        };

        let (keys, align) = if cfg.toggles.gsahf_gram {
            (
                Some([
                    Fc::zeros(&mut store, "keys.r", d, d)?,
                    Fc::zeros(&mut store, "keys.x", d, d)?,
                ]),
                Some(AlignWeights::init(&mut store, "align")?),
            )
        } else {
            (None, None)
        };

        let hyper = if cfg.toggles.gsahf_mhg {
            Some(HyperConvParams::init(&mut store, "hyper", d, &mut root.fork(4))?)
        } else {
            None
        };

        let n = cfg.dims.search_grid();
        let mut grid = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                grid.push((j as f64 + 0.5) / n as f64);
                grid.push((i as f64 + 0.5) / n as f64);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            adapters,
            mff,
            keys,
            align,
            fusion,
            hyper,
            head,
            grid: Tensor::new([n * n, 2], grid)?,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.numel(&self.store.trainable_ids())
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    /// Template rows first, then search rows, for each modality.
    pub fn prepare(&self, s: &Sample) -> Result<Prepared> {
        let p = self.cfg.dims.patch;
        let stack = |t: &Tensor, srch: &Tensor| -> Result<Tensor> {
            let a = patchify(t, p)?;
            let b = patchify(srch, p)?;
            let cols = a.cols();
            let mut data = a.into_data();
            data.extend_from_slice(b.data());
            Tensor::new([data.len() / cols, cols], data)
        };
        Ok(Prepared {
            patches_r: stack(&s.template_r, &s.search_r)?,
            patches_x: stack(&s.template_x, &s.search_x)?,
            heatmap: heatmap(self.cfg.dims.search_grid(), &s.gt),
            gt: s.gt,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &Prepared) -> Result<ForwardPass> {
        self.forward_with(g, s, None)
    }

    pub fn forward_with(&self, g: &mut Graph, s: &Prepared, replay: Option<&Structure>) -> Result<ForwardPass> {
        let dims = &self.cfg.dims;
        let t = dims.tokens_per_modality();
        let tt = dims.template_tokens();
        let search_idx: Vec<usize> = (tt..t).collect();
        let first: Vec<usize> = (0..t).collect();
        let second: Vec<usize> = (t..2 * t).collect();

        let mut xr = self.backbone.embed(g, &s.patches_r)?;
        let mut xx = self.backbone.embed(g, &s.patches_x)?;
        let mut levels_r = Vec::new();
        let mut levels_x = Vec::new();
        let mut balance: Option<Var> = None;
        let mut usage = vec![0; self.cfg.moe.n_experts];
        let mut evaluations = 0;
        let mut structure = Structure::default();

        for (b, blk) in self.backbone.blocks.iter().enumerate() {
            xr = self.backbone.block(g, blk, xr, dims.heads)?;
            xx = self.backbone.block(g, blk, xx, dims.heads)?;
            if let Some(adapter) = self.adapters.get(b) {
                let a = g.scatter_rows(xr, &first, 2 * t)?;
                let c = g.scatter_rows(xx, &second, 2 * t)?;
                let stacked = g.add(a, c)?;
                let forced = replay.and_then(|r| r.routing.get(b)).map(Vec::as_slice);
                let out = adapter.forward_with(g, stacked, forced)?;
                xr = g.gather_rows(out.output, &first)?;
                xx = g.gather_rows(out.output, &second)?;
                for (u, c) in usage.iter_mut().zip(out.decision.usage()) {
                    *u += c;
                }
                evaluations += out.expert_evaluations;
                structure.routing.push(out.decision.selected);
                balance = Some(match balance {
                    Some(acc) => g.add(acc, out.balance)?,
                    None => out.balance,
                });
            }
            if self.cfg.gsahf.level_taps.contains(&(b + 1)) {
                levels_r.push(g.gather_rows(xr, &search_idx)?);
                levels_x.push(g.gather_rows(xx, &search_idx)?);
            }
        }

        let mut sr = g.gather_rows(xr, &search_idx)?;
        let mut sx = g.gather_rows(xx, &search_idx)?;
        if let Some([mr, mx]) = &self.mff {
            let pr = g.param(mr.w);
            let fr = multi_level_fuse(g, &levels_r, pr)?;
            sr = g.add(sr, fr)?;
            let px = g.param(mx.w);
            let fx = multi_level_fuse(g, &levels_x, px)?;
            sx = g.add(sx, fx)?;
        }

        let mut fused = match (&self.keys, &self.align) {
            (Some([kr, kx]), Some(align)) => {
                let dr = kr.forward(g, sr)?;
                let key_r = g.add(sr, dr)?;
                let dx = kx.forward(g, sx)?;
                let key_x = g.add(sx, dx)?;
                cross_align(g, key_r, key_x, align, &self.fusion)?
            }
            _ => {
                let cat = g.concat_cols(&[sx, sr])?;
                self.fusion.forward(g, cat)?
            }
        };

        if let Some(hp) = &self.hyper {
            let hg = match replay.and_then(|r| r.hypergraph.as_ref()) {
                Some(h) => h.clone(),
                None => {
                    let v = g.value(fused);
                    Hypergraph::build(v, self.cfg.gsahf.epsilon.resolve(v))?
                }
            };
            fused = hyperconv(g, fused, &hg, hp)?;
            structure.hypergraph = Some(hg);
        }

        let h = self.head.hidden.forward(g, fused)?;
        let h = g.silu(h);
        let logit = self.head.cls.forward(g, h)?;
        let prob = g.sigmoid(logit);
        let row = g.transpose(logit)?;
        let attn = g.softmax(row, 1)?;
        let grid = g.constant(self.grid.clone());
        let center = g.matmul(attn, grid)?;
        let pooled = g.matmul(attn, h)?;
        let wh = self.head.size.forward(g, pooled)?;
        let wh = g.sigmoid(wh);
        let pred = g.concat_cols(&[center, wh])?;

        let cls = focal_node(g, prob, &s.heatmap)?;
        let iou = giou_node(g, pred, &s.gt)?;
        let l1 = l1_node(g, pred, &s.gt)?;
        let eb = match balance {
            Some(sum) => g.scale(sum, 1.0 / self.adapters.len() as f64),
            None => g.constant(Tensor::scalar(0.0)),
        };
        let loss = total_node(g, cls, iou, l1, eb, &self.cfg.loss)?;
        Ok(ForwardPass {
            loss,
            cls,
            iou,
            l1,
            eb,
            pred,
            usage,
            expert_evaluations: evaluations,
            structure,
        })
    }

    /// Predicted box for one sample.
    pub fn predict(&self, s: &Prepared) -> Result<BBox> {
        let mut g = Graph::new(&self.store);
        let fp = self.forward(&mut g, s)?;
        let b = BBox::from_slice(g.value(fp.pred).data())?;
        if !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite box prediction".into()));
        }
        Ok(b)
    }
}

/// Non-overlapping patch flattening followed by `x·w + b`: `[C,H,W] -> [T,D]`.
pub fn patch_embed(g: &mut Graph, frame: &Tensor, patch: usize, w: Var, b: Option<Var>) -> Result<Var> {
    let x = g.constant(patchify(frame, patch)?);
    g.linear(x, w, b)
}

/// Gaussian centre target on the `n × n` search grid with an exact 1 at the
/// cell containing the box centre.
pub fn heatmap(n: usize, gt: &BBox) -> Tensor {
    let ci = ((gt.cy * n as f64).floor() as usize).min(n - 1);
    let cj = ((gt.cx * n as f64).floor() as usize).min(n - 1);
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let di = i as f64 - ci as f64;
            let dj = j as f64 - cj as f64;
            data.push((-(di * di + dj * dj) / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp());
        }
    }
    Tensor::new([n * n, 1], data).expect("heatmap shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Toggles;
    use crate::harness::data::{render_sample, Degradation};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("model_dim", "24"),
            ("depth", "2"),
            ("heads", "2"),
            ("search_size", "16"),
            ("template_size", "8"),
            ("head_hidden", "8"),
            ("level_taps", "1,2"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn heatmap_peaks_once() {
        let h = heatmap(8, &BBox::new(0.3, 0.7, 0.2, 0.2));
        let ones: Vec<usize> = (0..64).filter(|&i| h.data()[i] == 1.0).collect();
        assert_eq!(ones, vec![5 * 8 + 2]);
    }

    #[test]
    fn backbone_is_frozen_and_new_parts_trainable() {
        let m = TrackerModel::new(&tiny()).unwrap();
        for id in m.frozen_ids() {
            assert!(!m.store.get(id).trainable);
        }
        assert_eq!(m.store.trainable_ids().len() + m.frozen_ids().len(), m.store.len());
    }

    #[test]
    fn forward_produces_finite_loss() {
        let cfg = tiny();
        let m = TrackerModel::new(&cfg).unwrap();
        let s = render_sample(&cfg.dims, Degradation::None, &mut RngStream::new(1));
        let p = m.prepare(&s).unwrap();
        let mut g = Graph::new(&m.store);
        let fp = m.forward(&mut g, &p).unwrap();
        assert!(g.value(fp.loss).item().is_finite());
        assert_eq!(g.shape(fp.pred), &[1, 4]);
        let t = 2 * cfg.dims.tokens_per_modality() * cfg.dims.depth;
        assert_eq!(fp.usage.iter().sum::<usize>(), t);
        assert_eq!(fp.structure.routing.len(), 2);
    }

    #[test]
    fn toggles_change_parameter_count() {
        let mut cfg = tiny();
        cfg.toggles = Toggles::NONE;
        let base = TrackerModel::new(&cfg).unwrap().trainable_count();
        cfg.toggles = Toggles::ALL;
        let full = TrackerModel::new(&cfg).unwrap().trainable_count();
        assert!(full > base);
    }
}
