//! Convolutional discriminator: four strided conv stages, global average
//! pooling and a single logistic output per image.

use super::ops::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, sigmoid, BatchNorm,
    BnCache, BnMode, BnUpdate, Conv2d, Linear,
};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const DISCRIMINATOR_WIDTHS: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug)]
pub struct Discriminator {
    stages: Vec<(Conv2d, BatchNorm)>,
    fc: Linear,
    slope: f64,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache {
    stages: Vec<(Tensor, BnCache, Tensor)>,
    last_shape: [usize; 4],
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Discriminator {
    pub fn new(seed: u64, slope: f64) -> (Discriminator, ParamStore) {
        let mut rng = rng::seeded(seed, stream::INIT_DISCRIMINATOR);
        let mut store = ParamStore::new();
        let mut cin = 1;
        let stages = DISCRIMINATOR_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv =
                    Conv2d::new(&mut store, &format!("d{i}.conv"), cin, w, 3, 2, 1, &mut rng);
                let bn = BatchNorm::new(&mut store, &format!("d{i}.bn"), w);
                cin = w;
                (conv, bn)
            })
            .collect();
        let fc = Linear::new(&mut store, "d.fc", cin, 1, &mut rng);
        (Discriminator { stages, fc, slope }, store)
    }

    pub fn final_layer(&self) -> &Linear {
        &self.fc
    }

    /// One score in (0, 1) per batch item.
    pub fn forward(&self, p: &[f64], x: &Tensor, mode: BnMode) -> Result<DiscriminatorCache> {
        let f = 1 << self.stages.len();
        if x.channels() != 1 || x.height() % f != 0 || x.width() % f != 0 || x.height() == 0 {
            return Err(Error::shape(format!(
                "discriminator expects one channel and dims divisible by {f}, got {:?}",
                x.shape
            )));
        }
        let mut updates = Vec::new();
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for (conv, bn) in &self.stages {
            let a = conv.forward(p, &cur)?;
            let (b, cache) = bn.forward(p, &a, mode, &mut updates)?;
            let next = leaky_relu(&b, self.slope);
            stages.push((cur, cache, b));
            cur = next;
        }
        let pooled = global_avg_pool(&cur);
        let logits = self.fc.forward(p, &pooled);
        let scores = logits.iter().map(|&v| sigmoid(v)).collect();
        Ok(DiscriminatorCache {
            stages,
            last_shape: cur.shape,
            pooled,
            logits,
            scores,
            bn_updates: updates,
        })
    }

    /// Backward from gradients with respect to the pre-sigmoid logits.
    pub fn backward_logits(
        &self,
        p: &[f64],
        cache: &DiscriminatorCache,
        dlogits: &[f64],
        grads: &mut [f64],
    ) -> Tensor {
        let dpool = self.fc.backward(p, &cache.pooled, dlogits, grads);
        let mut d = global_avg_pool_backward(cache.last_shape, &dpool);
        for ((conv, bn), (input, bn_cache, pre)) in self.stages.iter().zip(&cache.stages).rev() {
            let db = leaky_relu_backward(pre, &d, self.slope);
            let da = bn.backward(p, bn_cache, &db, grads);
            d = conv.backward(p, input, &da, grads);
        }
        d
    }

    /// Backward from gradients with respect to the scores.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &DiscriminatorCache,
        dscores: &[f64],
        grads: &mut [f64],
    ) -> Tensor {
        let dlogits: Vec<f64> = cache
            .scores
            .iter()
            .zip(dscores)
            .map(|(s, g)| g * s * (1.0 - s))
            .collect();
        self.backward_logits(p, cache, &dlogits, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grad, random_tensor};

    #[test]
    fn scores_are_probabilities() {
        let (d, store) = Discriminator::new(1, 0.2);
        let x = random_tensor([3, 1, 32, 32], 2);
        let cache = d.forward(&store.values, &x, BnMode::Batch).unwrap();
        assert_eq!(cache.scores.len(), 3);
        assert!(cache.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn zero_final_layer_gives_one_half() {
        let (d, mut store) = Discriminator::new(1, 0.2);
        let fc = d.final_layer().clone();
        fc.weight.of_mut(&mut store.values).fill(0.0);
        fc.bias.of_mut(&mut store.values).fill(0.0);
        let x = random_tensor([2, 1, 16, 16], 3);
        let cache = d.forward(&store.values, &x, BnMode::Batch).unwrap();
        assert_eq!(cache.scores, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let (d, store) = Discriminator::new(1, 0.2);
        assert!(d
            .forward(&store.values, &Tensor::zeros([1, 1, 24, 24]), BnMode::Batch)
            .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, store) = Discriminator::new(4, 0.2);
        let x = random_tensor([2, 1, 16, 16], 5);
        let weights = [0.7, -1.3];
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let c = d.forward(p, x, BnMode::Batch).unwrap();
            c.scores.iter().zip(&weights).map(|(s, w)| w * s).sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let c = d.forward(p, x, BnMode::Batch).unwrap();
            d.backward(p, &c, &weights, g)
        };
        check_input_grad(&store.values, &x, &loss, &back, 1e-4);
        check_param_grad(
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
            1e-4,
        );
    }
}
