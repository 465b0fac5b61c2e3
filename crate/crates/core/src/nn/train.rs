//! SGD-with-momentum training loop and dataset evaluation.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EpochMetrics};
use super::graph::Graph;
use super::loss::weighted_ce_loss;
use super::model::{argmax_map, samples_to_tensor, Model};
use super::tensor::Tensor;
use crate::dataio::{DatasetSplit, SkeletonSample};
use crate::error::{Error, Result};
use crate::metrics::acc_space;
use crate::par;
use crate::spacemask::{make_proxy_label, ProxyLabel, SpaceMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep a numbered checkpoint every this many epochs (0 keeps only the
    /// latest).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 0.1,
            lr_decay_every: 30,
            epochs: 80,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay_every > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training schedule: {self:?}")))
        }
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Samples with their precomputed targets.
pub struct LabelledSet {
    pub samples: Vec<SkeletonSample>,
    pub labels: Vec<ProxyLabel>,
}

impl LabelledSet {
    pub fn new(split: &DatasetSplit, masks: &(SpaceMask, SpaceMask)) -> Result<Self> {
        let labels = split
            .samples
            .iter()
            .map(|s| make_proxy_label(s, &masks.0, &masks.1))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples: split.samples.clone(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct SampleStep {
    loss: f64,
    acc: f64,
    grads: Vec<Tensor>,
}

fn sample_step(model: &Model, sample: &SkeletonSample, label: &ProxyLabel) -> Result<SampleStep> {
    let mut g = Graph::new(model.params());
    let fwd = model.forward(&mut g, samples_to_tensor([sample])?);
    let (lh, lv) = (g.value(fwd.logits_h), g.value(fwd.logits_v));
    let out = weighted_ce_loss(lh, lv, &[label])?;
    let acc = acc_space(&argmax_map(lh, 0), &argmax_map(lv, 0), label)?;
    let grads = g.backward(vec![(fwd.logits_h, out.grad_h), (fwd.logits_v, out.grad_v)]);
    Ok(SampleStep {
        loss: out.loss,
        acc,
        grads,
    })
}

/// Trains `model` in place and returns the final checkpoint.
///
/// Each sample of a batch is forwarded and differentiated independently
/// (in parallel when enabled); gradients are summed in batch order, so the
/// result does not depend on thread scheduling. The per-epoch loss and
/// Acc_space are running means over the training forward passes. When
/// `out_dir` is given, `metrics.csv` and checkpoints are written there.
pub fn train(
    model: &mut Model,
    data: &LabelledSet,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot train on an empty split".into()));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "epoch,loss,acc_space")?;
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut velocity: Vec<Tensor> = (0..model.params().len())
        .map(|i| Tensor::zeros(model.params().tensor(i).shape()))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let lr = tcfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for (batch, idx) in order.chunks(tcfg.batch_size).enumerate() {
            let steps = par::map_slice(idx, |&i| sample_step(model, &data.samples[i], &data.labels[i]));
            let scale = 1.0 / idx.len() as f32;
            let mut grads: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for step in steps {
                let step = step?;
                batch_loss += step.loss;
                acc_sum += step.acc;
                match &mut grads {
                    None => grads = Some(step.grads),
                    Some(acc) => acc.iter_mut().zip(&step.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: batch_loss / idx.len() as f64,
                    epoch,
                    batch,
                    lr,
                });
            }
            loss_sum += batch_loss;
            let grads = grads.expect("nonempty batch");
            for (i, g) in grads.iter().enumerate() {
                let p = model.params_mut().tensor_mut(i);
                let v = &mut velocity[i];
                let (mu, wd) = (tcfg.momentum as f32, tcfg.weight_decay as f32);
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = mu * *vv + gv * scale + wd * *pv;
                    *pv -= lr as f32 * *vv;
                }
            }
        }
        let n = data.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / n,
            acc_space: acc_sum / n,
        };
        log::info!("epoch {:>3}  lr {lr:.4}  loss {:.5}  acc_space {:.4}", m.epoch, m.loss, m.acc_space);
        history.push(m);
        if let (Some(f), Some(dir)) = (csv.as_mut(), out_dir) {
            writeln!(f, "{},{},{}", m.epoch, m.loss, m.acc_space)?;
            let ckpt = snapshot(model, tcfg, &history);
            ckpt.save(&dir.join("latest"))?;
            if tcfg.checkpoint_every > 0 && m.epoch % tcfg.checkpoint_every == 0 {
                ckpt.save(&dir.join(format!("epoch_{:03}", m.epoch)))?;
            }
        }
    }
    let ckpt = snapshot(model, tcfg, &history);
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("latest"))?;
    }
    Ok(ckpt)
}

fn snapshot(model: &Model, tcfg: &TrainConfig, history: &[EpochMetrics]) -> Checkpoint {
    Checkpoint {
        weights: model.params().clone(),
        epoch: history.last().map_or(0, |m| m.epoch),
        model: model.config().clone(),
        train: tcfg.clone(),
        metrics_history: history.to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean per-image Acc_space.
    pub acc_space: f64,
    /// Mean per-image loss.
    pub loss: f64,
    pub n_images: usize,
}

/// Scores a model on a labelled set without updating it.
pub fn evaluate(model: &Model, data: &LabelledSet) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate on an empty split".into()));
    }
    let scores = par::map_indexed(data.len(), |i| -> Result<(f64, f64)> {
        let out = model.infer(samples_to_tensor([&data.samples[i]])?, &[])?;
        let label = &data.labels[i];
        let loss = weighted_ce_loss(&out.logits_h, &out.logits_v, &[label])?.loss;
        let acc = acc_space(&argmax_map(&out.logits_h, 0), &argmax_map(&out.logits_v, 0), label)?;
        Ok((acc, loss))
    });
    let (mut acc, mut loss) = (0.0, 0.0);
    for s in scores {
        let (a, l) = s?;
        acc += a;
        loss += l;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        acc_space: acc / n,
        loss: loss / n,
        n_images: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthesize_skeletons;
    use crate::nn::model::{build_model, Backbone, ModelConfig};
    use crate::spacemask::{build_mask_pair, MaskScheme};

    fn setup(count: usize) -> (Model, LabelledSet) {
        let mut cfg = ModelConfig::desk_scale(Backbone::Tiny, 5);
        cfg.input_size = (32, 32);
        cfg.width = 4;
        let split = synthesize_skeletons(count, (32, 32), 1).unwrap();
        let masks = build_mask_pair((32, 32), 4, MaskScheme::Xy).unwrap();
        (build_model(&cfg).unwrap(), LabelledSet::new(&split, &masks).unwrap())
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            epochs,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_decays_every_thirty_epochs() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 0.1);
        assert_eq!(t.lr_at(29), 0.1);
        assert!((t.lr_at(30) - 0.01).abs() < 1e-15);
        assert!((t.lr_at(79) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let (mut model, data) = setup(4);
        let init = model.params().clone();
        let ckpt = train(&mut model, &data, &quick(0), None).unwrap();
        assert_eq!(ckpt.weights, init);
        assert!(ckpt.metrics_history.is_empty());
    }

    #[test]
    fn same_seed_same_history() {
        let (mut a, data) = setup(8);
        let (mut b, _) = setup(8);
        let ha = train(&mut a, &data, &quick(2), None).unwrap();
        let hb = train(&mut b, &data, &quick(2), None).unwrap();
        assert_eq!(ha.metrics_history, hb.metrics_history);
        assert_eq!(ha.weights, hb.weights);
    }

    #[test]
    fn diverging_lr_reports_non_finite_loss() {
        let (mut model, data) = setup(4);
        let tcfg = TrainConfig {
            lr: 1e12,
            ..quick(3)
        };
        match train(&mut model, &data, &tcfg, None) {
            Err(Error::NonFiniteLoss { lr, .. }) => assert_eq!(lr, 1e12),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|c| c.epoch)),
        }
    }

    #[test]
    fn checkpoint_reload_is_bit_identical() {
        let (mut model, data) = setup(4);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = train(&mut model, &data, &quick(1), Some(dir.path())).unwrap();
        let loaded = Checkpoint::load(&dir.path().join("latest")).unwrap();
        assert_eq!(loaded, ckpt);
        let input = samples_to_tensor([&data.samples[0]]).unwrap();
        let a = model.infer(input.clone(), &[]).unwrap();
        let b = loaded.to_model().unwrap().infer(input, &[]).unwrap();
        assert_eq!(a.logits_h, b.logits_h);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("epoch,loss,acc_space\n1,"));
        assert!(dir.path().join("epoch_001").join("weights.safetensors").exists());
    }
}
