//! End-to-end finite-difference check of the whole tracker.

use super::config::RunConfig;
use super::data::{render_sample, Degradation};
use super::model::TrackerModel;
use crate::error::Result;
use crate::numerics::{check_param_gradients, ParamCheck, RngStream};

/// D=16, depth 2, N=2, M=2, G=4, 16 search tokens.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("model_dim", "16"),
        ("depth", "2"),
        ("heads", "2"),
        ("mlp_ratio", "2"),
        ("head_hidden", "8"),
        ("search_size", "16"),
        ("template_size", "8"),
        ("n_experts", "2"),
        ("top_k", "1"),
        ("reduction_g", "4"),
        ("shared_m", "2"),
        ("level_taps", "1,2"),
    ] {
        c.set(k, v).expect("valid tiny setting");
    }
    c
}

/// Checks every trainable parameter of a model built from `cfg`.
///
/// Zero-initialized parameters are first replaced by small random values so
/// that no gradient path is trivially closed. Routing selections and the
/// hypergraph of the unperturbed pass are replayed during differencing.
pub fn end_to_end(cfg: &RunConfig, h: f64) -> Result<Vec<ParamCheck>> {
    let mut model = TrackerModel::new(cfg)?;
    let mut rng = RngStream::new(cfg.seed).fork(99);
    for id in model.store.trainable_ids() {
        let shape = model.store.tensor(id).shape().to_vec();
        let noise = rng.normal_tensor(shape, 0.2);
        let t = model.store.tensor(id).add(&noise)?;
        *model.store.tensor_mut(id) = t;
    }
    let sample = render_sample(&cfg.dims, Degradation::None, &mut rng);
    let prepared = model.prepare(&sample)?;
    let structure = {
        let mut g = crate::numerics::Graph::new(&model.store);
        model.forward(&mut g, &prepared)?.structure
    };
    let ids = model.store.trainable_ids();
    check_param_gradients(&model.store, &ids, h, |g| {
        Ok(model.forward_with(g, &prepared, Some(&structure))?.loss)
    })
}
