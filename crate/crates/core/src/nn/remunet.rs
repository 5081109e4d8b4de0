//! RemU-Net generator: a strided encoder, a remnant-block bridge and a
//! transposed-convolution decoder with skip connections.

use serde::{Deserialize, Serialize};

use super::ops::{
    leaky_relu, leaky_relu_backward, tanh_backward, BatchNorm, BnCache, BnMode, BnUpdate, Conv2d,
    ConvTranspose2d,
};
use super::params::ParamStore;
use super::tensor::{add_broadcast, concat_channels, reduce_broadcast, split_channels, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemUNetConfig {
    pub levels: usize,
    pub base_width: usize,
    pub remnant_widths: [usize; 3],
    pub leaky_slope: f64,
}

impl Default for RemUNetConfig {
    fn default() -> Self {
        RemUNetConfig {
            levels: 3,
            base_width: 8,
            remnant_widths: [8, 16, 32],
            leaky_slope: 0.2,
        }
    }
}

impl RemUNetConfig {
    /// Full-width layout; far too slow for desk-scale training.
    pub fn full_scale() -> Self {
        RemUNetConfig {
            levels: 4,
            base_width: 64,
            remnant_widths: [64, 128, 256],
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.remnant_widths;
        if self.levels == 0 || self.base_width == 0 || a == 0 || !(a < b && b < c) {
            return Err(Error::Config(format!(
                "invalid generator layout: levels {}, base width {}, remnant widths {:?}",
                self.levels, self.base_width, self.remnant_widths
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::Config(format!(
                "invalid leaky slope {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Encoder width at 0-based level `k`.
    fn enc_width(&self, k: usize) -> usize {
        self.base_width << k
    }

    /// Decoder width produced at 0-based level `k`.
    fn dec_width(&self, k: usize) -> usize {
        if k == 0 {
            self.base_width
        } else {
            self.base_width << (k - 1)
        }
    }

    /// Spatial sizes must survive `levels` halvings.
    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.levels;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by 2^{} = {f}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Single-channel bridge block. The batch-normalized input is added to the
/// input of every stage, and the block output is subtracted from it.
#[derive(Clone, Debug)]
pub struct RemnantBlock {
    pub bn_in: BatchNorm,
    pub stages: [(Conv2d, BatchNorm); 3],
    pub proj: Conv2d,
}

#[derive(Clone, Debug)]
pub struct RemnantCache {
    bn_in: BnCache,
    /// Per stage: conv input, BN cache, BN output.
    stages: Vec<(Tensor, BnCache, Tensor)>,
    proj_in: Tensor,
}

impl RemnantBlock {
    pub fn new(store: &mut ParamStore, name: &str, widths: [usize; 3], rng: &mut Rng) -> Self {
        let bn_in = BatchNorm::new(store, &format!("{name}.bn_in"), 1);
        let mut cin = 1;
        let mut build = |i: usize, w: usize| {
            let conv = Conv2d::new(store, &format!("{name}.conv{i}"), cin, w, 3, 1, 1, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), w);
            cin = w;
            (conv, bn)
        };
        let stages = [
            build(1, widths[0]),
            build(2, widths[1]),
            build(3, widths[2]),
        ];
        let proj = Conv2d::new(store, &format!("{name}.proj"), widths[2], 1, 1, 1, 0, rng);
        RemnantBlock {
            bn_in,
            stages,
            proj,
        }
    }

    pub fn forward(
        &self,
        p: &[f64],
        x: &Tensor,
        mode: BnMode,
        slope: f64,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Tensor, RemnantCache)> {
        if x.channels() != 1 {
            return Err(Error::shape(format!(
                "remnant block expects a single-channel input, got {:?}",
                x.shape
            )));
        }
        let (xn, bn_in) = self.bn_in.forward(p, x, mode, updates)?;
        let mut stages = Vec::with_capacity(3);
        let mut h = xn.clone();
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            let input = if i == 0 {
                xn.clone()
            } else {
                add_broadcast(&h, &xn)?
            };
            let a = conv.forward(p, &input)?;
            let (b, cache) = bn.forward(p, &a, mode, updates)?;
            h = leaky_relu(&b, slope);
            stages.push((input, cache, b));
        }
        let proj_in = add_broadcast(&h, &xn)?;
        let out = self.proj.forward(p, &proj_in)?;
        let residue = Tensor {
            shape: xn.shape,
            data: xn.data.iter().zip(&out.data).map(|(a, b)| a - b).collect(),
        };
        Ok((
            residue,
            RemnantCache {
                bn_in,
                stages,
                proj_in,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &RemnantCache,
        dres: &Tensor,
        slope: f64,
        grads: &mut [f64],
    ) -> Tensor {
        let mut dxn = dres.clone();
        let dout = dres.map(|v| -v);
        let mut dh = self.proj.backward(p, &cache.proj_in, &dout, grads);
        dxn.add_assign(&reduce_broadcast(&dh));
        for (i, (conv, bn)) in self.stages.iter().enumerate().rev() {
            let (input, bn_cache, b) = &cache.stages[i];
            let db = leaky_relu_backward(b, &dh, slope);
            let da = bn.backward(p, bn_cache, &db, grads);
            let din = conv.backward(p, input, &da, grads);
            if i == 0 {
                dxn.add_assign(&din);
            } else {
                dxn.add_assign(&reduce_broadcast(&din));
                dh = din;
            }
        }
        self.bn_in.backward(p, &cache.bn_in, &dxn, grads)
    }
}

#[derive(Clone, Debug)]
struct Stage<L> {
    layer: L,
    bn: BatchNorm,
}

/// Layer layout of a generator. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RemUNet {
    pub config: RemUNetConfig,
    encoder: Vec<Stage<Conv2d>>,
    bridge: Conv2d,
    remnant: RemnantBlock,
    /// Index `k` produces decoder level `k`; run in reverse order.
    decoder: Vec<Stage<ConvTranspose2d>>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
struct StageCache {
    input: Tensor,
    bn: BnCache,
    pre_act: Tensor,
}

/// Intermediates of one generator forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorCache {
    input: Tensor,
    encoder: Vec<StageCache>,
    bridge_in: Tensor,
    remnant: RemnantCache,
    decoder: Vec<StageCache>,
    head_in: Tensor,
    output: Tensor,
    /// Batch statistics gathered in [`BnMode::Batch`].
    pub bn_updates: Vec<BnUpdate>,
}

impl RemUNet {
    /// Builds the layout and draws Kaiming-initialized weights into a fresh
    /// store, in manifest order.
    pub fn new(config: RemUNetConfig, seed: u64) -> Result<(RemUNet, ParamStore)> {
        config.validate()?;
        let mut rng = rng::seeded(seed, stream::INIT_GENERATOR);
        let mut store = ParamStore::new();
        let l = config.levels;
        let mut encoder = Vec::with_capacity(l);
        for k in 0..l {
            let cin = if k == 0 { 1 } else { config.enc_width(k - 1) };
            let cout = config.enc_width(k);
            encoder.push(Stage {
                layer: Conv2d::new(
                    &mut store,
                    &format!("enc{k}.conv"),
                    cin,
                    cout,
                    3,
                    2,
                    1,
                    &mut rng,
                ),
                bn: BatchNorm::new(&mut store, &format!("enc{k}.bn"), cout),
            });
        }
        let bridge = Conv2d::new(
            &mut store,
            "bridge",
            config.enc_width(l - 1),
            1,
            1,
            1,
            0,
            &mut rng,
        );
        let remnant = RemnantBlock::new(&mut store, "remnant", config.remnant_widths, &mut rng);
        let mut decoder: Vec<Option<Stage<ConvTranspose2d>>> = (0..l).map(|_| None).collect();
        for k in (0..l).rev() {
            let cin = if k == l - 1 {
                config.enc_width(l - 1) + 1
            } else {
                config.dec_width(k + 1) + config.enc_width(k)
            };
            let cout = config.dec_width(k);
            decoder[k] = Some(Stage {
                layer: ConvTranspose2d::upsample2(
                    &mut store,
                    &format!("dec{k}.up"),
                    cin,
                    cout,
                    &mut rng,
                ),
                bn: BatchNorm::new(&mut store, &format!("dec{k}.bn"), cout),
            });
        }
        let head = Conv2d::new(
            &mut store,
            "head",
            config.dec_width(0) + 1,
            1,
            3,
            1,
            1,
            &mut rng,
        );
        let net = RemUNet {
            config,
            encoder,
            bridge,
            remnant,
            decoder: decoder
                .into_iter()
                .map(|s| s.expect("every level built"))
                .collect(),
            head,
        };
        Ok((net, store))
    }

    pub fn remnant(&self) -> &RemnantBlock {
        &self.remnant
    }

    /// Maps a `[n, 1, h, w]` batch to an equally shaped output in (-1, 1).
    pub fn forward(&self, p: &[f64], x: &Tensor, mode: BnMode) -> Result<(Tensor, GeneratorCache)> {
        if x.channels() != 1 {
            return Err(Error::shape(format!(
                "generator expects one channel, got {:?}",
                x.shape
            )));
        }
        self.config.check_dims(x.height(), x.width())?;
        let slope = self.config.leaky_slope;
        let mut updates = Vec::new();
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut encoded: Vec<Tensor> = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for st in &self.encoder {
            let a = st.layer.forward(p, &cur)?;
            let (b, bn) = st.bn.forward(p, &a, mode, &mut updates)?;
            let e = leaky_relu(&b, slope);
            enc_caches.push(StageCache {
                input: cur,
                bn,
                pre_act: b,
            });
            encoded.push(e.clone());
            cur = e;
        }
        let bridge_in = cur;
        let projected = self.bridge.forward(p, &bridge_in)?;
        let (residue, remnant) = self
            .remnant
            .forward(p, &projected, mode, slope, &mut updates)?;
        let mut d = concat_channels(&bridge_in, &residue)?;
        let mut dec_caches: Vec<Option<StageCache>> =
            (0..self.decoder.len()).map(|_| None).collect();
        for k in (0..self.decoder.len()).rev() {
            let st = &self.decoder[k];
            let u = st.layer.forward(p, &d)?;
            let (b, bn) = st.bn.forward(p, &u, mode, &mut updates)?;
            let a = leaky_relu(&b, slope);
            let skip = if k == 0 { x } else { &encoded[k - 1] };
            let next = concat_channels(&a, skip)?;
            dec_caches[k] = Some(StageCache {
                input: d,
                bn,
                pre_act: b,
            });
            d = next;
        }
        let z = self.head.forward(p, &d)?;
        let output = z.map(f64::tanh);
        Ok((
            output.clone(),
            GeneratorCache {
                input: x.clone(),
                encoder: enc_caches,
                bridge_in,
                remnant,
                decoder: dec_caches
                    .into_iter()
                    .map(|c| c.expect("every level run"))
                    .collect(),
                head_in: d,
                output,
                bn_updates: updates,
            },
        ))
    }

    /// Accumulates parameter gradients for `dy = dL/d output` and returns
    /// the input gradient.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &GeneratorCache,
        dy: &Tensor,
        grads: &mut [f64],
    ) -> Result<Tensor> {
        if dy.shape != cache.output.shape {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {:?}",
                dy.shape, cache.output.shape
            )));
        }
        let slope = self.config.leaky_slope;
        let dz = tanh_backward(&cache.output, dy);
        let mut dd = self.head.backward(p, &cache.head_in, &dz, grads);
        let mut denc: Vec<Option<Tensor>> = (0..self.encoder.len()).map(|_| None).collect();
        let mut dx = Tensor::zeros(cache.input.shape);
        for k in 0..self.decoder.len() {
            let st = &self.decoder[k];
            let sc = &cache.decoder[k];
            let width = st.bn.channels;
            let (da, dskip) = split_channels(&dd, width);
            if k == 0 {
                dx.add_assign(&dskip);
            } else {
                denc[k - 1] = Some(dskip);
            }
            let db = leaky_relu_backward(&sc.pre_act, &da, slope);
            let du = st.bn.backward(p, &sc.bn, &db, grads);
            dd = st.layer.backward(p, &sc.input, &du, grads);
        }
        let (dbridge_in, dres) = split_channels(&dd, cache.bridge_in.channels());
        let dproj = self
            .remnant
            .backward(p, &cache.remnant, &dres, slope, grads);
        let mut dcur = self.bridge.backward(p, &cache.bridge_in, &dproj, grads);
        dcur.add_assign(&dbridge_in);
        for k in (0..self.encoder.len()).rev() {
            if let Some(extra) = denc[k].take() {
                dcur.add_assign(&extra);
            }
            let st = &self.encoder[k];
            let sc = &cache.encoder[k];
            let db = leaky_relu_backward(&sc.pre_act, &dcur, slope);
            let da = st.bn.backward(p, &sc.bn, &db, grads);
            dcur = st.layer.backward(p, &sc.input, &da, grads);
        }
        dx.add_assign(&dcur);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{
        finite_difference, max_relative_error, probe_coords, random_tensor,
    };

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn remnant_with_zero_weights_returns_normalized_input() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1, 0);
        let block = RemnantBlock::new(&mut store, "r", [8, 16, 32], &mut r);
        let p = vec![0.0; store.len()];
        let x = random_tensor([1, 1, 8, 8], 3);
        let (res, _) = block
            .forward(&p, &x, BnMode::PassThrough, 0.2, &mut Vec::new())
            .unwrap();
        assert_eq!(res, x);
    }

    #[test]
    fn remnant_rejects_multichannel_input() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1, 0);
        let block = RemnantBlock::new(&mut store, "r", [2, 3, 4], &mut r);
        let x = random_tensor([1, 2, 8, 8], 3);
        assert!(block
            .forward(&store.values, &x, BnMode::Batch, 0.2, &mut Vec::new())
            .is_err());
    }

    #[test]
    fn remnant_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(2, 0);
        let block = RemnantBlock::new(&mut store, "r", [4, 6, 8], &mut r);
        let x = random_tensor([1, 1, 8, 8], 5);
        let probe = random_tensor([1, 1, 8, 8], 6);
        let p = store.values.clone();
        let f = |p: &[f64], x: &Tensor| {
            let (res, _) = block
                .forward(p, x, BnMode::Batch, 0.2, &mut Vec::new())
                .unwrap();
            assert_eq!(res.shape, x.shape);
            dot(&res, &probe)
        };
        let (_, cache) = block
            .forward(&p, &x, BnMode::Batch, 0.2, &mut Vec::new())
            .unwrap();
        let mut g = vec![0.0; p.len()];
        let dx = block.backward(&p, &cache, &probe, 0.2, &mut g);
        let coords = probe_coords(x.len(), 64, 1);
        let fd = finite_difference(
            |v| {
                f(
                    &p,
                    &Tensor {
                        shape: x.shape,
                        data: v.to_vec(),
                    },
                )
            },
            &x.data,
            &coords,
        );
        let an: Vec<f64> = coords.iter().map(|&i| dx.data[i]).collect();
        assert!(max_relative_error(&an, &fd) < 1e-4);
        let trainable = store.trainable_indices();
        let coords: Vec<usize> = probe_coords(trainable.len(), 80, 2)
            .into_iter()
            .map(|i| trainable[i])
            .collect();
        let fd = finite_difference(|v| f(v, &x), &p, &coords);
        let an: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        assert!(max_relative_error(&an, &fd) < 1e-4);
    }

    #[test]
    fn generator_is_shape_preserving_and_bounded() {
        let (net, store) = RemUNet::new(RemUNetConfig::default(), 4).unwrap();
        let x = random_tensor([1, 1, 64, 64], 7).map(|v| 3.0 * v);
        let (y, cache) = net.forward(&store.values, &x, BnMode::Batch).unwrap();
        assert_eq!(y.shape, x.shape);
        assert!(y.data.iter().all(|v| v.abs() < 1.0));
        assert_eq!(cache.bn_updates.len(), 3 + 4 + 3);
    }

    #[test]
    fn generator_rejects_indivisible_dims() {
        let (net, store) = RemUNet::new(RemUNetConfig::default(), 4).unwrap();
        let x = Tensor::zeros([1, 1, 20, 16]);
        assert!(matches!(
            net.forward(&store.values, &x, BnMode::Batch),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn initialization_is_deterministic() {
        let (_, a) = RemUNet::new(RemUNetConfig::default(), 9).unwrap();
        let (_, b) = RemUNet::new(RemUNetConfig::default(), 9).unwrap();
        let (_, c) = RemUNet::new(RemUNetConfig::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn generator_gradients() {
        let cfg = RemUNetConfig {
            levels: 2,
            base_width: 4,
            remnant_widths: [2, 3, 4],
            leaky_slope: 0.2,
        };
        let (net, store) = RemUNet::new(cfg, 11).unwrap();
        let x = random_tensor([2, 1, 16, 16], 8);
        let probe = random_tensor([2, 1, 16, 16], 9);
        let p = store.values.clone();
        for mode in [BnMode::Batch, BnMode::Running] {
            let f = |p: &[f64], x: &Tensor| dot(&net.forward(p, x, mode).unwrap().0, &probe);
            let (_, cache) = net.forward(&p, &x, mode).unwrap();
            let mut g = vec![0.0; p.len()];
            let dx = net.backward(&p, &cache, &probe, &mut g).unwrap();
            let trainable = store.trainable_indices();
            let coords: Vec<usize> = probe_coords(trainable.len(), 60, 3)
                .into_iter()
                .map(|i| trainable[i])
                .collect();
            let fd = finite_difference(|v| f(v, &x), &p, &coords);
            let an: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
            assert!(max_relative_error(&an, &fd) < 1e-4, "{mode:?}");
            let coords = probe_coords(x.len(), 40, 4);
            let fd = finite_difference(
                |v| {
                    f(
                        &p,
                        &Tensor {
                            shape: x.shape,
                            data: v.to_vec(),
                        },
                    )
                },
                &x.data,
                &coords,
            );
            let an: Vec<f64> = coords.iter().map(|&i| dx.data[i]).collect();
            assert!(max_relative_error(&an, &fd) < 1e-4, "{mode:?}");
        }
    }
}
