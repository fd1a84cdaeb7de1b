//! Central finite differences against backpropagation on the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saic_core::model::{encode_graph, ModelParams, SceneFeatures};
use saic_core::nn::{Graph, Var};
use saic_core::tokens::TokenId;
use saic_core::training::{loss_for, ExampleKind};

use super::{random_features, tiny_config, Check};

const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

/// Summed loss of all four example kinds on one caption, with the graph
/// that computed it.
fn total_loss(params: &ModelParams, feat: &SceneFeatures, caption: &[TokenId], k: usize) -> (Graph, Var) {
    let mut g = Graph::new();
    let mem = encode_graph(&mut g, params, feat).unwrap();
    let mut total = loss_for(&mut g, params, mem, ExampleKind::ALL[0], caption, k).unwrap();
    for kind in &ExampleKind::ALL[1..] {
        let l = loss_for(&mut g, params, mem, *kind, caption, k).unwrap();
        total = g.add(total, l).unwrap();
    }
    (g, total)
}

fn loss_value(params: &ModelParams, feat: &SceneFeatures, caption: &[TokenId], k: usize) -> f64 {
    let (g, l) = total_loss(params, feat, caption, k);
    g.value(l).data()[0]
}

/// Every parameter of a 2-layer model, perturbed one at a time.
pub fn two_layer_gradients() -> Check {
    let mut params = ModelParams::init(tiny_config(9, 2), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feat = random_features(&mut rng, 3, 3);
    let caption: Vec<TokenId> = vec![4, 7, 5, 8, 6];
    let k = 2;
    let (mut g, l) = total_loss(&params, &feat, &caption, k);
    let mut store = params.store.clone();
    store.zero_grads();
    g.backward(l, &mut store).unwrap();
    let ids: Vec<_> = params.store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();
    let (mut worst, mut worst_at, mut count) = (0.0f64, String::new(), 0);
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (j, &a) in grads.iter().enumerate() {
            let orig = params.store.value(id).data()[j];
            params.store.value_mut(id).data_mut()[j] = orig + H;
            let up = loss_value(&params, &feat, &caption, k);
            params.store.value_mut(id).data_mut()[j] = orig - H;
            let down = loss_value(&params, &feat, &caption, k);
            params.store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = format!(
                    "{}[{j}]: analytic {a:.6e}, numeric {numeric:.6e}",
                    params.store.name(id)
                );
            }
            count += 1;
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:.2e} at {worst_at}");
    Ok(format!("{count} parameters, max relative error {worst:.2e}"))
}
