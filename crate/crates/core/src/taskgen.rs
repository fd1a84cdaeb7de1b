//! Synthetic captioning task.
//!
//! A scene holds one to three objects, each a colored shape in a distinct
//! cell of a 4×4 grid. The caption lists objects in row-major cell order as
//! `a <color> <shape> at r<row> c<col>`, joined by `and`, so captions are 6,
//! 13 or 20 tokens long. Each object contributes one feature row: one-hot
//! shape, color, row and column, the cell index scaled to `[0, 1]`, plus
//! Gaussian noise. Scene `i` depends only on `(seed, i)`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::model::SceneFeatures;
use crate::nn::Tensor;
use crate::seed::rng_for;
use crate::tokens::{TokenId, Vocab};

pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "heart", "diamond", "cross", "ring",
];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "black", "white"];
pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 3;
pub const FEATURE_DIM: usize = SHAPES.len() + COLORS.len() + 2 * GRID + 1;
pub const FEATURE_NOISE: f64 = 0.1;

/// The fixed word list, in vocabulary order after the reserved symbols.
pub fn task_words() -> Vec<String> {
    let mut w: Vec<String> = vec!["a".into(), "and".into(), "at".into()];
    w.extend(COLORS.iter().map(|s| s.to_string()));
    w.extend(SHAPES.iter().map(|s| s.to_string()));
    w.extend((0..GRID).map(|r| format!("r{r}")));
    w.extend((0..GRID).map(|c| format!("c{c}")));
    w
}

pub fn task_vocab() -> Vocab {
    Vocab::new(&task_words()).expect("task words are distinct")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    /// Row-major cell index in `0..16`.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    /// Sorted by cell.
    pub objects: Vec<SceneObject>,
    pub features: SceneFeatures,
    pub reference: Vec<TokenId>,
}

/// The templated caption of `objects`, which must be sorted by cell.
pub fn describe(objects: &[SceneObject], vocab: &Vocab) -> Vec<TokenId> {
    let id = |w: &str| vocab.id(w).expect("task word in vocabulary");
    let mut out = Vec::with_capacity(objects.len() * 7);
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            out.push(id("and"));
        }
        out.push(id("a"));
        out.push(id(COLORS[o.color]));
        out.push(id(SHAPES[o.shape]));
        out.push(id("at"));
        out.push(id(&format!("r{}", o.cell / GRID)));
        out.push(id(&format!("c{}", o.cell % GRID)));
    }
    out
}

/// Noise-free feature row of one object.
pub fn object_features(o: &SceneObject) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    v[o.shape] = 1.0;
    v[SHAPES.len() + o.color] = 1.0;
    let base = SHAPES.len() + COLORS.len();
    v[base + o.cell / GRID] = 1.0;
    v[base + GRID + o.cell % GRID] = 1.0;
    v[FEATURE_DIM - 1] = o.cell as f64 / (GRID * GRID - 1) as f64;
    v
}

/// Scene `id` under `seed`.
pub fn gen_scene(seed: u64, id: usize, vocab: &Vocab) -> SyntheticScene {
    let mut rng = rng_for(seed, &format!("scene/{id}"));
    let count = rng.random_range(1..=MAX_OBJECTS);
    let mut cells = sample(&mut rng, GRID * GRID, count).into_vec();
    cells.sort_unstable();
    let objects: Vec<SceneObject> = cells
        .into_iter()
        .map(|cell| SceneObject {
            shape: rng.random_range(0..SHAPES.len()),
            color: rng.random_range(0..COLORS.len()),
            cell,
        })
        .collect();
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid deviation");
    let mut data = Vec::with_capacity(count * FEATURE_DIM);
    for o in &objects {
        data.extend(object_features(o).into_iter().map(|x| x + noise.sample(&mut rng)));
    }
    let features =
        SceneFeatures::new(Tensor::matrix(count, FEATURE_DIM, data).expect("shape")).expect("finite features");
    let reference = describe(&objects, vocab);
    SyntheticScene {
        id,
        objects,
        features,
        reference,
    }
}

/// Train/validation/test partition of scene ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 by id: the first `floor(0.8 n)` ids train, the next
/// `floor(0.1 n)` validate, the rest test.
pub fn split_ids(n: usize) -> Splits {
    let train = n * 8 / 10;
    let val = n / 10;
    Splits {
        train: (0..train).collect(),
        val: (train..train + val).collect(),
        test: (train + val..n).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub vocab: Vocab,
    pub scenes: Vec<SyntheticScene>,
    pub splits: Splits,
}

pub fn gen_dataset(n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return contract("dataset needs at least one scene");
    }
    let vocab = task_vocab();
    let scenes = (0..n).map(|i| gen_scene(seed, i, &vocab)).collect();
    Ok(SyntheticDataset {
        seed,
        vocab,
        scenes,
        splits: split_ids(n),
    })
}
