//! Per-frame speaking classifier: temporal model followed by a fully
//! connected layer producing one logit per frame.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingSequence, Modality, TemporalModel};
use crate::error::{Error, Result};
use crate::nn::{Cell, Linear, Path, Recurrent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub gru_hidden: usize,
    pub temporal: TemporalModel,
}

pub struct TemporalClassifier {
    rnn: Option<Recurrent>,
    fc: Linear,
    input_dim: usize,
    accepts: Modality,
}

impl TemporalClassifier {
    /// `accepts` is the modality of embeddings this head is fed: fused for
    /// the main head, visual for the auxiliary one.
    pub fn new(p: &mut Path<'_>, cfg: &ClassifierConfig, accepts: Modality) -> Result<Self> {
        let rnn = match cfg.temporal {
            TemporalModel::None => None,
            TemporalModel::Gru => Some(Recurrent::new(&mut p.pp("rnn"), Cell::Gru, cfg.input_dim, cfg.gru_hidden, false)?),
            TemporalModel::BiGru => Some(Recurrent::new(&mut p.pp("rnn"), Cell::Gru, cfg.input_dim, cfg.gru_hidden, true)?),
            TemporalModel::Lstm => Some(Recurrent::new(&mut p.pp("rnn"), Cell::Lstm, cfg.input_dim, cfg.gru_hidden, false)?),
            TemporalModel::BiLstm => Some(Recurrent::new(&mut p.pp("rnn"), Cell::Lstm, cfg.input_dim, cfg.gru_hidden, true)?),
        };
        let fc_in = rnn.as_ref().map_or(cfg.input_dim, Recurrent::output_dim);
        let fc = Linear::new(&mut p.pp("fc"), fc_in, 1, true)?;
        Ok(Self {
            rnn,
            fc,
            input_dim: cfg.input_dim,
            accepts,
        })
    }

    /// `x: (N, T, D)` -> logits `(N, T)`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        if d != self.input_dim || t == 0 {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects (N, T>0, {}), got {:?}",
                self.input_dim,
                x.dims()
            )));
        }
        let h = match &self.rnn {
            Some(rnn) => rnn.forward(x)?,
            None => x.clone(),
        };
        Ok(self.fc.forward(&h)?.reshape((n, t))?)
    }

    /// One logit per frame of a single sequence.
    pub fn forward(&self, seq: &EmbeddingSequence) -> Result<Tensor> {
        if seq.modality() != self.accepts {
            return Err(Error::ShapeMismatch(format!(
                "head expects {:?} embeddings, got {:?}",
                self.accepts,
                seq.modality()
            )));
        }
        Ok(self.forward_batch(&seq.values().unsqueeze(0)?)?.squeeze(0)?)
    }
}

/// Main head on the fused audio-visual sequence.
pub fn forward_classifier(head: &TemporalClassifier, av: &EmbeddingSequence) -> Result<Vec<f64>> {
    logits_vec(&head.forward(av)?)
}

/// Auxiliary head on the visual sequence alone.
pub fn forward_visual_head(head: &TemporalClassifier, v: &EmbeddingSequence) -> Result<Vec<f64>> {
    logits_vec(&head.forward(v)?)
}

fn logits_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(temporal: TemporalModel, dtype: DType) -> (ParamStore, TemporalClassifier) {
        let mut store = ParamStore::new(dtype, 11);
        let cfg = ClassifierConfig {
            input_dim: 128,
            gru_hidden: 128,
            temporal,
        };
        let h = TemporalClassifier::new(&mut store.root().pp("head"), &cfg, Modality::Fused).unwrap();
        (store, h)
    }

    fn input(t: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..t * 128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (1, t, 128), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn one_logit_per_frame() {
        for temporal in [TemporalModel::BiGru, TemporalModel::None, TemporalModel::Gru, TemporalModel::Lstm, TemporalModel::BiLstm] {
            let (_s, h) = head(temporal, DType::F32);
            assert_eq!(h.forward_batch(&input(25, 1, DType::F32)).unwrap().dims(), &[1, 25]);
            assert_eq!(h.forward_batch(&input(1, 1, DType::F32)).unwrap().dims(), &[1, 1]);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let (_s, h) = head(TemporalModel::BiGru, DType::F32);
        let x = Tensor::zeros((1, 4, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(h.forward_batch(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn modality_is_checked() {
        let (_s, h) = head(TemporalModel::BiGru, DType::F32);
        let seq = EmbeddingSequence::new(input(3, 1, DType::F32).squeeze(0).unwrap(), Modality::Visual).unwrap();
        assert!(h.forward(&seq).is_err());
        let fused = EmbeddingSequence::new(input(3, 1, DType::F32).squeeze(0).unwrap(), Modality::Fused).unwrap();
        assert_eq!(forward_classifier(&h, &fused).unwrap().len(), 3);
    }

    #[test]
    fn information_flows_both_ways() {
        let (_s, h) = head(TemporalModel::BiGru, DType::F64);
        let t = 10;
        let x = input(t, 2, DType::F64);
        let base = h.forward_batch(&x).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        let bump = |frame: usize| {
            let mut v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            v[frame * 128] += 0.5;
            let y = Tensor::from_vec(v, (1, t, 128), &Device::Cpu).unwrap();
            h.forward_batch(&y).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap()
        };
        // Frame 0 reaches the last logit (forward direction) and the last
        // frame reaches the first logit (backward direction).
        assert!((bump(0)[t - 1] - base[t - 1]).abs() > 0.0);
        assert!((bump(t - 1)[0] - base[0]).abs() > 0.0);
    }

    #[test]
    fn per_frame_head_is_local() {
        let (_s, h) = head(TemporalModel::None, DType::F64);
        let x = input(6, 3, DType::F64);
        let base = h.forward_batch(&x).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        let mut v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        v[0] += 1.0;
        let y = Tensor::from_vec(v, (1, 6, 128), &Device::Cpu).unwrap();
        let moved = h.forward_batch(&y).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(moved[0], base[0]);
        assert_eq!(&moved[1..], &base[1..]);
    }

    #[test]
    fn constant_input_gives_equal_interior_logits() {
        let (_s, h) = head(TemporalModel::BiGru, DType::F64);
        let x = Tensor::zeros((1, 200, 128), DType::F64, &Device::Cpu).unwrap();
        let l = h.forward_batch(&x).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        // Both directions reach their fixed points away from the ends.
        for w in l[80..120].windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-6, "{} vs {}", w[0], w[1]);
        }
    }

    #[test]
    fn bigru_head_budget() {
        let (with, _) = head(TemporalModel::BiGru, DType::F32);
        let (without, _) = head(TemporalModel::None, DType::F32);
        let delta = with.num_params() - without.num_params();
        assert!((150_000..=250_000).contains(&delta), "{delta}");
    }
}
