use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{graph_loss, patchify, Forecaster, LossParts, MODULE};
use crate::autograd::{AdamW, Graph, Mat};
use crate::error::{Error, Result};
use crate::fields::FieldTensor;

/// Input state and the state one step later.
#[derive(Debug, Clone)]
pub struct Pair {
    pub input: FieldTensor,
    pub target: FieldTensor,
}

impl Pair {
    /// Consecutive pairs of a time-ordered sequence.
    pub fn from_sequence(seq: &[FieldTensor]) -> Vec<Pair> {
        seq.windows(2).map(|w| Pair { input: w[0].clone(), target: w[1].clone() }).collect()
    }
}

/// Regional pair plus the concurrent global input state.
#[derive(Debug, Clone)]
pub struct RegionalPair {
    pub input: FieldTensor,
    pub target: FieldTensor,
    pub global: FieldTensor,
}

/// Training or validation pairs; regional data carries precomputed global
/// block states from the frozen global model.
#[derive(Debug, Clone)]
pub struct Dataset {
    pairs: Vec<Pair>,
    global_states: Option<Vec<Vec<Mat>>>,
}

impl Dataset {
    pub fn global(pairs: Vec<Pair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid(MODULE, "dataset is empty"));
        }
        Ok(Dataset { pairs, global_states: None })
    }

    pub fn regional(pairs: Vec<RegionalPair>, global_model: &Forecaster) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid(MODULE, "dataset is empty"));
        }
        let mut states = Vec::with_capacity(pairs.len());
        let mut plain = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.input.timestamp() != p.global.timestamp() {
                return Err(Error::Consistency { module: MODULE, message: "regional and global inputs are not concurrent".into() });
            }
            states.push(global_model.block_states(&p.global)?);
            plain.push(Pair { input: p.input, target: p.target });
        }
        Ok(Dataset { pairs: plain, global_states: Some(states) })
    }

    /// The same pairs without global states (for uncoupled regional training).
    pub fn without_global(&self) -> Dataset {
        Dataset { pairs: self.pairs.clone(), global_states: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn global_states(&self, i: usize) -> Option<&[Mat]> {
        self.global_states.as_ref().map(|s| s[i].as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub obj_pred: f64,
    pub obj_recon: f64,
    pub obj_final: f64,
}

/// Sample indices for a step. Steps walk through a fresh permutation of the
/// dataset per epoch, so the batch depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let pos = step * batch as u64 + k;
            let epoch = pos / n as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Forecaster,
    pub optimizer: AdamW,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Forecaster, seed: u64) -> Self {
        let optimizer = AdamW::new(model.config.optimizer, &model.store);
        Trainer { model, optimizer, seed }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// One optimizer update on the batch chosen for the current step.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord> {
        let step = self.optimizer.step;
        let cfg = &self.model.config;
        let batch = batch_indices(self.seed, step, data.len(), cfg.batch_size);
        let mut g = Graph::new();
        let mut total = None;
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let pair = &data.pairs[i];
            let out = self.model.forward(&mut g, pair.input.values(), pair.input.month(), data.global_states(i))?;
            let yn = patchify(pair.target.values(), cfg.patch)?;
            let xn = patchify(pair.input.values(), cfg.patch)?;
            let (lp, lr, lf) = graph_loss(&mut g, out.prediction, out.reconstruction, &yn, &xn, cfg.lambda_recon);
            sp += g.scalar(lp);
            sr += g.scalar(lr);
            sf += g.scalar(lf);
            total = Some(match total {
                Some(t) => g.add(t, lf),
                None => lf,
            });
        }
        let b = batch.len() as f64;
        let record = LossRecord { step, obj_pred: sp / b, obj_recon: sr / b, obj_final: sf / b };
        if !record.obj_final.is_finite() {
            return Err(Error::Diverged { module: MODULE, message: format!("loss is {} at step {step}", record.obj_final) });
        }
        let total = total.expect("batch is nonempty");
        let loss = g.scale(total, 1.0 / b);
        let grads = g.backward(loss);
        let grads = g.param_grads(&grads);
        self.optimizer.step(&mut self.model.store, &grads);
        if !self.model.store.all_finite() {
            return Err(Error::Diverged { module: MODULE, message: format!("non-finite parameters after step {step}") });
        }
        Ok(record)
    }

    /// Runs `steps` updates, reporting each record as it is produced.
    pub fn train(&mut self, data: &Dataset, steps: u64, mut on_record: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step(data)?;
            on_record(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Mean loss terms over every pair.
    pub fn evaluate(&self, data: &Dataset) -> Result<LossParts> {
        let mut acc = LossParts { obj_pred: 0.0, obj_recon: 0.0, obj_final: 0.0 };
        for (i, p) in data.pairs.iter().enumerate() {
            let l = self.model.pair_loss(&p.input, &p.target, data.global_states(i))?;
            acc.obj_pred += l.obj_pred;
            acc.obj_recon += l.obj_recon;
            acc.obj_final += l.obj_final;
        }
        let n = data.len() as f64;
        Ok(LossParts { obj_pred: acc.obj_pred / n, obj_recon: acc.obj_recon / n, obj_final: acc.obj_final / n })
    }
}

/// Writes `step,obj_pred,obj_recon,obj_final` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(MODULE, path, e))?;
    let mut text = String::from("step,obj_pred,obj_recon,obj_final\n");
    for r in records {
        text.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.obj_pred, r.obj_recon, r.obj_final));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(MODULE, path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(7, s, 10, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, 3, 10, 2), batch_indices(7, 3, 10, 2));
        assert_ne!(batch_indices(7, 0, 10, 4), batch_indices(8, 0, 10, 4));
    }
}
