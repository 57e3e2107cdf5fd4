//! Head-only fine-tuning over a frozen backbone, plus the midpoint
//! layer-size sweep.
//!
//! Everything below the first fully connected layer is frozen: its
//! activations are computed once per image, cached, and the parameters are
//! never touched. The head (fc / relu / dropout, closed by softmax
//! cross-entropy) trains by plain SGD on uniformly sampled minibatches.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::arch::{ArchSpec, LayerKind};
use crate::dataio::{decode_image, preprocess, DatasetManifest, PreprocessConfig};
use crate::error::{Error, Result};
use crate::layers::{
    cross_entropy, dropout_backward, dropout_forward, fc_backward, fc_forward, softmax,
};
use crate::network::{init_weights, LayerParams, Network};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

/// Default granularity the sweep rounds candidate sizes to.
pub const SWEEP_GRANULARITY: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    /// Fully connected layers to update; the rest of the head still
    /// propagates gradients but keeps its weights.
    pub trainable: BTreeSet<usize>,
    pub seed: u64,
    /// Log the minibatch loss every this many iterations.
    pub log_stride: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-4,
            iterations: 20_000,
            batch_size: 32,
            trainable: BTreeSet::new(),
            seed: 0,
            log_stride: 100,
        }
    }
}

/// (iteration, minibatch cross-entropy loss) pairs, strictly increasing in
/// iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    entries: Vec<(usize, f32)>,
}

impl LossLog {
    fn push(&mut self, iteration: usize, loss: f32) {
        debug_assert!(self.entries.last().map_or(true, |(i, _)| *i < iteration));
        self.entries.push((iteration, loss));
    }

    pub fn entries(&self) -> &[(usize, f32)] {
        &self.entries
    }

    /// Tab-separated `iteration<TAB>loss` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, loss) in &self.entries {
            out.push_str(&format!("{i}\t{loss}\n"));
        }
        out
    }
}

/// Rebuild the fully connected head with fresh Gaussian(0, 0.01^2) weights.
///
/// `head_sizes` maps fc layer index to its new width; absent layers keep
/// their spec width. The final fc layer becomes `num_classes` wide unless an
/// explicit size at least that large is requested. Every layer below the
/// first fc layer is carried over bitwise.
pub fn replace_head(
    net: &Network,
    head_sizes: &BTreeMap<usize, usize>,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let spec = net.spec();
    let fc_indices = spec.fc_indices();
    let Some(&last_fc) = fc_indices.last() else {
        return Err(Error::Config(
            "architecture has no fully connected layer".into(),
        ));
    };
    for (&idx, &size) in head_sizes {
        if !fc_indices.contains(&idx) {
            return Err(Error::Config(format!(
                "layer {idx} is not a fully connected layer"
            )));
        }
        if size == 0 {
            return Err(Error::Config(format!("layer {idx} size must be positive")));
        }
    }
    if let Some(&size) = head_sizes.get(&last_fc) {
        if size < num_classes {
            return Err(Error::Config(format!(
                "classification layer {last_fc} size {size} is below the class count {num_classes}"
            )));
        }
    }

    let mut new_spec = spec.clone();
    for layer in &mut new_spec.layers {
        if let LayerKind::Fc { out } = &mut layer.kind {
            *out = match head_sizes.get(&layer.index) {
                Some(&size) => size,
                None if layer.index == last_fc => num_classes,
                None => *out,
            };
        }
    }

    // Fresh parameters for the whole head; everything below the first fc
    // layer is moved over untouched.
    let fresh = init_weights(&new_spec, rng)?;
    let mut params = Vec::with_capacity(new_spec.layers.len());
    for (layer, fresh_param) in new_spec.layers.iter().zip(fresh.params()) {
        if matches!(layer.kind, LayerKind::Fc { .. }) {
            params.push(fresh_param.clone());
        } else {
            params.push(
                net.layer_params(layer.index)
                    .expect("same layer count")
                    .clone(),
            );
        }
    }
    Network::new(new_spec, params)
}

/// One layer of the trainable head, in forward order.
enum HeadLayer {
    Fc { index: usize },
    Relu,
    Dropout { rate: f32 },
}

fn head_layers(spec: &ArchSpec) -> Result<Vec<HeadLayer>> {
    let Some(first_fc) = spec.first_fc_index() else {
        return Err(Error::Config(
            "architecture has no fully connected layer".into(),
        ));
    };
    let mut layers = Vec::new();
    for l in &spec.layers {
        if l.index < first_fc {
            continue;
        }
        match &l.kind {
            LayerKind::Fc { .. } => layers.push(HeadLayer::Fc { index: l.index }),
            LayerKind::Relu => layers.push(HeadLayer::Relu),
            LayerKind::Dropout { rate } => layers.push(HeadLayer::Dropout { rate: *rate }),
            LayerKind::Softmax => {} // folded into the loss
            other => {
                return Err(Error::Config(format!(
                    "layer {} ({}) cannot sit above the first fc layer during fine-tuning",
                    l.index,
                    other.name()
                )))
            }
        }
    }
    Ok(layers)
}

/// Per-fc-layer gradient accumulators for one minibatch.
struct GradSlot {
    index: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Train the fully connected head by SGD with softmax cross-entropy.
///
/// Expects [`replace_head`] to have run already, so the final fc width
/// equals the manifest's class count. Returns the updated network and the
/// loss log. A non-finite minibatch loss aborts with a divergence error.
pub fn train_head(
    net: &Network,
    manifest: &DatasetManifest,
    pre: &PreprocessConfig,
    cfg: &FinetuneConfig,
) -> Result<(Network, LossLog)> {
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if manifest.is_empty() {
        return Err(Error::Data("training manifest is empty".into()));
    }
    let spec = net.spec();
    let fc_indices = spec.fc_indices();
    let Some(&last_fc) = fc_indices.last() else {
        return Err(Error::Config(
            "architecture has no fully connected layer".into(),
        ));
    };
    let head_width = match net.layer_params(last_fc) {
        Some(LayerParams::Fc(p)) => p.out_dim,
        _ => unreachable!("validated by Network::new"),
    };
    if head_width != manifest.classes.len() {
        return Err(Error::Config(format!(
            "head outputs {head_width} classes but the manifest has {}",
            manifest.classes.len()
        )));
    }
    // Trainable defaults to every fc layer.
    let trainable: BTreeSet<usize> = if cfg.trainable.is_empty() {
        fc_indices.iter().copied().collect()
    } else {
        for idx in &cfg.trainable {
            if !fc_indices.contains(idx) {
                return Err(Error::Config(format!(
                    "trainable layer {idx} is not a fully connected layer"
                )));
            }
        }
        cfg.trainable.clone()
    };

    // Frozen-backbone activations, one pass per image, cached for the whole
    // run.
    let mut features = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for sample in &manifest.samples {
        let img = decode_image(Path::new(&sample.image_path))?;
        let input = preprocess(&img, pre);
        features.push(net.forward_frozen(&input)?);
        let label = manifest
            .label_index(&sample.label)
            .expect("label in classes");
        labels.push(label);
    }

    let layers = head_layers(spec)?;
    let mut trained = net.clone();
    let mut log = LossLog::default();
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut dropout_rng = rng::stream(cfg.seed, "dropout");
    let lr = f64::from(cfg.learning_rate);
    let n = features.len();

    enum Trace {
        Fc { index: usize, input: Vec<f32> },
        Relu { input: Vec<f32> },
        Dropout { mask: Vec<bool>, rate: f32 },
    }

    // Minibatches walk a seeded permutation of the training set, reshuffled
    // each epoch.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut next_index = |shuffle_rng: &mut rand_chacha::ChaCha8Rng| -> usize {
        if cursor >= n {
            order.shuffle(shuffle_rng);
            cursor = 0;
        }
        let idx = order[cursor];
        cursor += 1;
        idx
    };

    for iter in 0..cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| next_index(&mut shuffle_rng))
            .collect();

        let mut grads: Vec<GradSlot> = trainable
            .iter()
            .map(|&index| {
                let LayerParams::Fc(p) = trained.layer_params(index).unwrap() else {
                    unreachable!()
                };
                GradSlot {
                    index,
                    weights: vec![0.0; p.weights.len()],
                    bias: vec![0.0; p.bias.len()],
                }
            })
            .collect();
        let mut batch_loss = 0f64;

        for &sample_idx in &batch {
            let mut x = features[sample_idx].clone();
            let mut trace = Vec::with_capacity(layers.len());
            for layer in &layers {
                match layer {
                    HeadLayer::Fc { index } => {
                        let LayerParams::Fc(p) = trained.layer_params(*index).unwrap() else {
                            unreachable!()
                        };
                        let out = fc_forward(&x, p)?;
                        trace.push(Trace::Fc {
                            index: *index,
                            input: x,
                        });
                        x = out;
                    }
                    HeadLayer::Relu => {
                        let out = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                        trace.push(Trace::Relu { input: x });
                        x = out;
                    }
                    HeadLayer::Dropout { rate } => {
                        let (out, mask) = dropout_forward(&x, *rate, true, &mut dropout_rng)?;
                        trace.push(Trace::Dropout { mask, rate: *rate });
                        x = out;
                    }
                }
            }
            let probs = softmax(&x);
            let (loss, grad_logits) = cross_entropy(&probs, labels[sample_idx])?;
            batch_loss += f64::from(loss);

            let mut g = grad_logits;
            for step in trace.iter().rev() {
                match step {
                    Trace::Fc { index, input } => {
                        let LayerParams::Fc(p) = trained.layer_params(*index).unwrap() else {
                            unreachable!()
                        };
                        let fc_grads = fc_backward(input, p, &g)?;
                        if let Some(slot) = grads.iter_mut().find(|s| s.index == *index) {
                            for (acc, v) in slot.weights.iter_mut().zip(&fc_grads.weights) {
                                *acc += f64::from(*v);
                            }
                            for (acc, v) in slot.bias.iter_mut().zip(&fc_grads.bias) {
                                *acc += f64::from(*v);
                            }
                        }
                        g = fc_grads.input;
                    }
                    Trace::Relu { input } => {
                        g = input
                            .iter()
                            .zip(&g)
                            .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                            .collect();
                    }
                    Trace::Dropout { mask, rate } => {
                        g = dropout_backward(&g, mask, *rate);
                    }
                }
            }
        }

        let batch_loss = (batch_loss / cfg.batch_size as f64) as f32;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        if cfg.log_stride > 0 && iter % cfg.log_stride == 0 {
            log.push(iter, batch_loss);
        }

        let scale = lr / cfg.batch_size as f64;
        for slot in &grads {
            let LayerParams::Fc(p) = trained.layer_params_mut(slot.index).unwrap() else {
                unreachable!()
            };
            for (w, gsum) in p.weights.iter_mut().zip(&slot.weights) {
                *w = (f64::from(*w) - scale * gsum) as f32;
            }
            for (b, gsum) in p.bias.iter_mut().zip(&slot.bias) {
                *b = (f64::from(*b) - scale * gsum) as f32;
            }
        }
        if cfg.log_stride > 0 && iter == cfg.iterations - 1 && iter % cfg.log_stride != 0 {
            log.push(iter, batch_loss);
        }
    }
    Ok((trained, log))
}

/// Outcome of [`sweep_layer_size`]: evaluation trace in execution order and
/// the argmax size.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub best: usize,
    pub trace: Vec<(usize, f64)>,
}

fn round_to_multiple(x: f64, granularity: usize) -> usize {
    let g = granularity as f64;
    let m = (x / g).round() as usize;
    (m.max(1)) * granularity
}

/// Midpoint layer-size search. Each round finds the best evaluated size and
/// its better-scoring neighbor, evaluates the midpoint between them plus the
/// two evenly spaced sizes on either side of that midpoint, and never
/// re-evaluates a cached size. Returns the argmax over everything evaluated.
pub fn sweep_layer_size(
    mut evaluate: impl FnMut(usize) -> Result<f64>,
    initial: [usize; 3],
    rounds: usize,
    granularity: usize,
) -> Result<SweepOutcome> {
    if granularity == 0 {
        return Err(Error::Config("sweep granularity must be positive".into()));
    }
    let mut sizes = initial;
    sizes.sort_unstable();
    if sizes[0] == 0 {
        return Err(Error::Config("sweep sizes must be positive".into()));
    }
    if sizes[0] == sizes[1] || sizes[1] == sizes[2] {
        return Err(Error::Config("sweep needs 3 distinct initial sizes".into()));
    }

    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut trace: Vec<(usize, f64)> = Vec::new();
    let mut run = |size: usize,
                   cache: &mut BTreeMap<usize, f64>,
                   trace: &mut Vec<(usize, f64)>|
     -> Result<()> {
        if cache.contains_key(&size) {
            return Ok(());
        }
        let acc = evaluate(size).map_err(|e| Error::Sweep {
            size,
            source: Box::new(e),
        })?;
        cache.insert(size, acc);
        trace.push((size, acc));
        Ok(())
    };

    for &s in &sizes {
        run(s, &mut cache, &mut trace)?;
    }

    for _ in 0..rounds {
        // Argmax over the cache; ties fall to the smaller size.
        let (&best, _) = cache
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
            .unwrap();
        let evaluated: Vec<usize> = cache.keys().copied().collect();
        let pos = evaluated.binary_search(&best).unwrap();
        let left = pos.checked_sub(1).map(|i| evaluated[i]);
        let right = evaluated.get(pos + 1).copied();
        let neighbor = match (left, right) {
            (Some(l), Some(r)) => {
                if cache[&l] >= cache[&r] {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => break, // single size cached; nothing to bisect
        };
        let lo = best.min(neighbor);
        let hi = best.max(neighbor);
        let mid = round_to_multiple((lo + hi) as f64 / 2.0, granularity);
        let below = round_to_multiple((lo + mid) as f64 / 2.0, granularity);
        let above = round_to_multiple((mid + hi) as f64 / 2.0, granularity);
        for size in [mid, below, above] {
            run(size, &mut cache, &mut trace)?;
        }
    }

    let (&best, _) = cache
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
        .unwrap();
    Ok(SweepOutcome { best, trace })
}
