//! Configurable 3D U-Net assembled from the autodiff primitives.
//!
//! Analysis path: per level, two conv(3³)+BN+ReLU blocks with "same"
//! padding, max-pooled between levels, channels doubling per level.
//! Synthesis path: conv-transpose(2³, stride 2), skip concatenation with
//! the matching analysis output, then two conv blocks. A final 1³
//! convolution maps to the class logits. Output spatial extents equal the
//! input's.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, BnStats, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Analysis/synthesis depth; input patch extents must divide 2^(levels-1).
    pub levels: usize,
    /// Channels at the top level, doubling per level down.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { levels: 3, base_channels: 8, in_channels: 2, out_channels: 5 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidConfig(format!("levels {} < 2", self.levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("zero channel count".into()));
        }
        Ok(())
    }

    /// Input patch extents must be divisible by this.
    pub fn patch_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// The network: named trainable parameters plus per-BN running statistics.
/// Parameters are immutable during inference; training is single-writer.
#[derive(Clone)]
pub struct UNet {
    config: UNetConfig,
    param_names: Vec<String>,
    param_tensors: Vec<Tensor>,
    param_index: HashMap<String, usize>,
    stat_names: Vec<String>,
    stat_values: Vec<BnStats>,
    stat_index: HashMap<String, usize>,
}

impl UNet {
    /// He-initialized network; weights drawn from the seed in a fixed
    /// order, biases zero, BN gamma 1 / beta 0, running stats (0, 1).
    pub fn build(config: UNetConfig, seed: u64) -> Result<UNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = UNet {
            config,
            param_names: Vec::new(),
            param_tensors: Vec::new(),
            param_index: HashMap::new(),
            stat_names: Vec::new(),
            stat_values: Vec::new(),
            stat_index: HashMap::new(),
        };

        fn conv_block(net: &mut UNet, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize) {
            let fan_in = (cin * 27) as f32;
            let std = (2.0 / fan_in).sqrt();
            net.add_param(
                format!("{name}.conv.weight"),
                Tensor::randn(&[cout, cin, 3, 3, 3], std, rng),
            );
            net.add_param(format!("{name}.conv.bias"), Tensor::zeros(&[cout]));
            net.add_param(format!("{name}.bn.gamma"), Tensor::filled(&[cout], 1.0));
            net.add_param(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
            net.add_stats(format!("{name}.bn"), BnStats::new(cout));
        }

        for level in 0..config.levels {
            let cin = if level == 0 { config.in_channels } else { config.channels_at(level - 1) };
            let cout = config.channels_at(level);
            conv_block(&mut net, &mut rng, format!("enc{level}.block1"), cin, cout);
            conv_block(&mut net, &mut rng, format!("enc{level}.block2"), cout, cout);
        }
        for level in (0..config.levels - 1).rev() {
            let c_deep = config.channels_at(level + 1);
            let c = config.channels_at(level);
            let std = (2.0 / (c_deep * 8) as f32).sqrt();
            net.add_param(
                format!("up{level}.weight"),
                Tensor::randn(&[c_deep, c, 2, 2, 2], std, &mut rng),
            );
            conv_block(&mut net, &mut rng, format!("dec{level}.block1"), 2 * c, c);
            conv_block(&mut net, &mut rng, format!("dec{level}.block2"), c, c);
        }
        let c0 = config.channels_at(0);
        let std = (2.0 / c0 as f32).sqrt();
        net.add_param(
            "head.weight".into(),
            Tensor::randn(&[config.out_channels, c0, 1, 1, 1], std, &mut rng),
        );
        net.add_param("head.bias".into(), Tensor::zeros(&[config.out_channels]));
        Ok(net)
    }

    fn add_param(&mut self, name: String, t: Tensor) {
        self.param_index.insert(name.clone(), self.param_tensors.len());
        self.param_names.push(name);
        self.param_tensors.push(t);
    }

    fn add_stats(&mut self, name: String, s: BnStats) {
        self.stat_index.insert(name.clone(), self.stat_values.len());
        self.stat_names.push(name);
        self.stat_values.push(s);
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_tensors(&self) -> &[Tensor] {
        &self.param_tensors
    }

    pub fn param_tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.param_tensors
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn stat_values(&self) -> &[BnStats] {
        &self.stat_values
    }

    pub(crate) fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let idx = *self
            .param_index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if t.shape() != self.param_tensors[idx].shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape {:?} != expected {:?}",
                t.shape(),
                self.param_tensors[idx].shape()
            )));
        }
        self.param_tensors[idx] = t;
        Ok(())
    }

    pub(crate) fn set_stats(&mut self, name: &str, s: BnStats) -> Result<()> {
        let idx = *self
            .stat_index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown bn layer '{name}'")))?;
        if s.mean.len() != self.stat_values[idx].mean.len() {
            return Err(Error::Checkpoint(format!("bn '{name}' channel count mismatch")));
        }
        self.stat_values[idx] = s;
        Ok(())
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.param_tensors.iter().map(|t| t.len()).sum()
    }

    /// Insert all parameters as graph leaves, in parameter order.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.param_tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.param_index[name]]
    }

    fn block(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        name: &str,
        input: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let w = self.var(vars, &format!("{name}.conv.weight"));
        let b = self.var(vars, &format!("{name}.conv.bias"));
        let gamma = self.var(vars, &format!("{name}.bn.gamma"));
        let beta = self.var(vars, &format!("{name}.bn.beta"));
        let si = self.stat_index[&format!("{name}.bn")];
        let c = g.conv3d(input, w, b, 1, 1)?;
        let n = g.batchnorm3d(c, gamma, beta, &mut self.stat_values[si], mode)?;
        g.relu(n)
    }

    /// Run the network on a bound graph. `vars` must come from
    /// [`UNet::bind`] on the same graph. Training mode updates BN running
    /// statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        input: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let [_, c, d, h, w] = g.value(input).dims5()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let div = self.config.patch_divisor();
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input extents {d}x{h}x{w} must divide {div}"
            )));
        }

        let levels = self.config.levels;
        let mut skips: Vec<Var> = Vec::with_capacity(levels - 1);
        let mut x = input;
        for level in 0..levels {
            x = self.block(g, vars, &format!("enc{level}.block1"), x, mode)?;
            x = self.block(g, vars, &format!("enc{level}.block2"), x, mode)?;
            if level < levels - 1 {
                skips.push(x);
                x = g.maxpool3d(x)?;
            }
        }
        for level in (0..levels - 1).rev() {
            let up_w = self.var(vars, &format!("up{level}.weight"));
            let up = g.conv_transpose3d(x, up_w, 2)?;
            let cat = g.concat(skips[level], up)?;
            x = self.block(g, vars, &format!("dec{level}.block1"), cat, mode)?;
            x = self.block(g, vars, &format!("dec{level}.block2"), x, mode)?;
        }
        let hw = self.var(vars, "head.weight");
        let hb = self.var(vars, "head.bias");
        g.conv3d(x, hw, hb, 1, 0)
    }

    /// Inference convenience: fresh non-recording graph, eval-mode BN.
    pub fn infer(&mut self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let iv = g.leaf(input, false);
        let out = self.forward(&mut g, &vars, iv, BnMode::Eval)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn build_is_deterministic() {
        let a = UNet::build(UNetConfig::default(), 7).unwrap();
        let b = UNet::build(UNetConfig::default(), 7).unwrap();
        for (x, y) in a.param_tensors().iter().zip(b.param_tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let c = UNet::build(UNetConfig::default(), 8).unwrap();
        assert_ne!(a.param_tensors()[0].data(), c.param_tensors()[0].data());
    }

    #[test]
    fn biases_start_at_zero() {
        let net = UNet::build(UNetConfig::default(), 1).unwrap();
        for (name, t) in net.param_names().iter().zip(net.param_tensors()) {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = UNetConfig { levels: 2, base_channels: 4, in_channels: 2, out_channels: 5 };
        let net = UNet::build(cfg, 0).unwrap();

        // Closed-form sum, block by block. A conv block at cin->cout has
        // 27*cin*cout weights + cout bias + 2*cout bn params.
        let block = |cin: usize, cout: usize| 27 * cin * cout + cout + 2 * cout;
        let expected =
            // enc0: 2->4, 4->4; enc1 (bottom): 4->8, 8->8
            block(2, 4) + block(4, 4) + block(4, 8) + block(8, 8)
            // up0: (8, 4, 2^3) transpose weights
            + 8 * 4 * 8
            // dec0: 8->4, 4->4
            + block(8, 4) + block(4, 4)
            // head 1x1x1: 4->5 plus bias
            + 4 * 5 + 5;
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn forward_shape_contract() {
        let mut net = UNet::build(UNetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2 * 16 * 16 * 16;
        let input = Tensor::new(
            vec![1, 2, 16, 16, 16],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = net.infer(input).unwrap();
        assert_eq!(out.shape(), &[1, 5, 16, 16, 16]);
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let mut net = UNet::build(UNetConfig::default(), 3).unwrap();
        let input = Tensor::filled(&[1, 2, 10, 16, 16], 0.0);
        assert!(net.infer(input).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let mut net = UNet::build(UNetConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2 * 8 * 8 * 8;
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = net.infer(Tensor::new(vec![1, 2, 8, 8, 8], data.clone()).unwrap()).unwrap();
        let b = net.infer(Tensor::new(vec![1, 2, 8, 8, 8], data).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn input_channels_are_not_symmetric() {
        let mut net = UNet::build(UNetConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spatial = 8 * 8 * 8;
        let c0: Vec<f32> = (0..spatial).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c1: Vec<f32> = (0..spatial).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut fwd = vec![0.0f32; 2 * spatial];
        fwd[..spatial].copy_from_slice(&c0);
        fwd[spatial..].copy_from_slice(&c1);
        let mut rev = vec![0.0f32; 2 * spatial];
        rev[..spatial].copy_from_slice(&c1);
        rev[spatial..].copy_from_slice(&c0);

        let a = net.infer(Tensor::new(vec![1, 2, 8, 8, 8], fwd).unwrap()).unwrap();
        let b = net.infer(Tensor::new(vec![1, 2, 8, 8, 8], rev).unwrap()).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let mut net = UNet::build(
            UNetConfig { levels: 3, base_channels: 4, in_channels: 2, out_channels: 5 },
            6,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2 * 2 * 8 * 8 * 8;
        let input =
            Tensor::new(vec![2, 2, 8, 8, 8], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let voxels = 2 * 8 * 8 * 8;
        let targets: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..5)).collect();

        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let iv = g.leaf(input, false);
        let logits = net.forward(&mut g, &vars, iv, BnMode::Train).unwrap();
        let loss = g
            .weighted_cross_entropy(logits, &targets, &[1.0; 5], &vec![true; voxels])
            .unwrap();
        g.backward(loss).unwrap();

        for (name, &v) in net.param_names().iter().zip(&vars) {
            let grad = g.grad(v).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(
                grad.data().iter().any(|&x| x != 0.0),
                "gradient identically zero for {name}"
            );
        }
    }
}
