//! Trainable layers and the parameter-to-tape binding glue.

use rand_chacha::ChaCha8Rng;

use crate::compute::{kaiming_uniform, Gradients, Parameter, Phase, Tape, Val};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Records which tape leaf each named parameter was bound to during one
/// forward pass, so gradients can be routed back by name afterwards.
pub struct Binder {
    entries: Vec<(String, Val)>,
    trainable: bool,
}

impl Binder {
    pub fn new(trainable: bool) -> Self {
        Binder { entries: Vec::new(), trainable }
    }

    pub fn bind<T: Real>(&mut self, tape: &mut Tape<T>, p: &Parameter<T>) -> Val {
        let v = tape.leaf(p.value.clone(), self.trainable);
        self.entries.push((p.name.clone(), v));
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Val> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }

    /// Copy the gradient of every bound parameter back into it. Parameters
    /// bound in a non-trainable pass have no gradient and are left untouched.
    pub fn route_gradients<T: Real>(
        &self,
        grads: &Gradients<T>,
        mut visit: impl FnMut(&mut dyn FnMut(&mut Parameter<T>)),
    ) -> Result<()> {
        if !self.trainable {
            return Err(Error::MissingGrad("forward pass was not trainable".into()));
        }
        visit(&mut |p: &mut Parameter<T>| {
            if let Some(v) = self.lookup(&p.name) {
                if let Some(g) = grads.get(v) {
                    p.grad = Some(g.clone());
                }
            }
        });
        Ok(())
    }
}

pub struct Conv2dLayer<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dLayer<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan = in_ch * kernel * kernel;
        Conv2dLayer {
            weight: Parameter::new(
                format!("{}.weight", prefix),
                kaiming_uniform(rng, vec![out_ch, in_ch, kernel, kernel], fan),
            ),
            bias: Parameter::new(format!("{}.bias", prefix), Tensor::zeros(vec![out_ch])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut Binder, x: Val) -> Result<Val> {
        let w = binder.bind(tape, &self.weight);
        let b = binder.bind(tape, &self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    /// Output side length for a square input of side `s`.
    pub fn out_side(&self, s: usize, kernel: usize) -> usize {
        (s + 2 * self.padding - kernel) / self.stride + 1
    }
}

pub struct BatchNorm2dLayer<T: Real> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
    name: String,
}

impl<T: Real> BatchNorm2dLayer<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Parameter::new(format!("{}.gamma", prefix), Tensor::full(vec![channels], T::one())),
            beta: Parameter::new(format!("{}.beta", prefix), Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            name: prefix.to_string(),
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (variance stored unbiased); eval mode normalizes
    /// with the running estimates.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        x: Val,
        phase: Phase,
    ) -> Result<Val> {
        let g = binder.bind(tape, &self.gamma);
        let b = binder.bind(tape, &self.beta);
        match phase {
            Phase::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, self.eps)?;
                let unbias = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let m = self.momentum;
                let keep = T::one() - m;
                let mean = self.running_mean.data_mut();
                for (r, &s) in mean.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * s;
                }
                let var = self.running_var.data_mut();
                for (r, &s) in var.iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * s * unbias;
                }
                Ok(y)
            }
            Phase::Eval => tape.batchnorm_eval(
                x,
                g,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }

    pub fn buffer_names(&self) -> (String, String) {
        (
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        )
    }
}

pub struct LinearLayer<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Parameter::new(
                format!("{}.weight", prefix),
                kaiming_uniform(rng, vec![out_dim, in_dim], in_dim),
            ),
            bias: Parameter::new(format!("{}.bias", prefix), Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut Binder, x: Val) -> Result<Val> {
        let w = binder.bind(tape, &self.weight);
        let b = binder.bind(tape, &self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// One downsampling block: conv (stride 2) + batch norm + relu.
pub struct ConvBnStage<T: Real> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNorm2dLayer<T>,
    pub kernel: usize,
}

impl<T: Real> ConvBnStage<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvBnStage {
            conv: Conv2dLayer::new(rng, &format!("{}.conv", prefix), in_ch, out_ch, kernel, stride, padding),
            bn: BatchNorm2dLayer::new(&format!("{}.bn", prefix), out_ch),
            kernel,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        x: Val,
        phase: Phase,
    ) -> Result<Val> {
        let h = self.conv.forward(tape, binder, x)?;
        let h = self.bn.forward(tape, binder, h, phase)?;
        Ok(tape.relu(h))
    }
}

/// Convolutional feature extractor: downsampling stages followed by a
/// stride-1 transition block whose maps are pooled into feature vectors.
pub struct Trunk<T: Real> {
    pub stages: Vec<ConvBnStage<T>>,
    pub transition: ConvBnStage<T>,
}

impl<T: Real> Trunk<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        stage_channels: &[usize],
        transition_channels: usize,
    ) -> Self {
        let mut stages = Vec::with_capacity(stage_channels.len());
        let mut ch = in_ch;
        for (i, &out) in stage_channels.iter().enumerate() {
            stages.push(ConvBnStage::new(
                rng,
                &format!("{}.stage{}", prefix, i),
                ch,
                out,
                3,
                2,
                1,
            ));
            ch = out;
        }
        let transition = ConvBnStage::new(
            rng,
            &format!("{}.transition", prefix),
            ch,
            transition_channels,
            3,
            1,
            1,
        );
        Trunk { stages, transition }
    }

    /// Returns pooled features (N x D) and pre-pooling maps (N x D x s x s).
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        x: Val,
        phase: Phase,
    ) -> Result<(Val, Val)> {
        let mut h = x;
        for stage in &mut self.stages {
            h = stage.forward(tape, binder, h, phase)?;
        }
        let maps = self.transition.forward(tape, binder, h, phase)?;
        let features = tape.global_avg_pool(maps)?;
        Ok((features, maps))
    }

    /// Side length of the transition maps for a square input of side `s`.
    pub fn map_side(&self, s: usize) -> usize {
        let mut side = s;
        for stage in &self.stages {
            side = stage.conv.out_side(side, stage.kernel);
        }
        side
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        for stage in &self.stages {
            out.push(&stage.conv.weight);
            out.push(&stage.conv.bias);
            out.push(&stage.bn.gamma);
            out.push(&stage.bn.beta);
        }
        out.push(&self.transition.conv.weight);
        out.push(&self.transition.conv.bias);
        out.push(&self.transition.bn.gamma);
        out.push(&self.transition.bn.beta);
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        for stage in &mut self.stages {
            out.push(&mut stage.conv.weight);
            out.push(&mut stage.conv.bias);
            out.push(&mut stage.bn.gamma);
            out.push(&mut stage.bn.beta);
        }
        out.push(&mut self.transition.conv.weight);
        out.push(&mut self.transition.conv.bias);
        out.push(&mut self.transition.bn.gamma);
        out.push(&mut self.transition.bn.beta);
    }

    pub fn collect_buffers<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for stage in self.stages.iter().chain(std::iter::once(&self.transition)) {
            let (mean, var) = stage.bn.buffer_names();
            out.push((mean, &stage.bn.running_mean));
            out.push((var, &stage.bn.running_var));
        }
    }

    pub fn collect_buffers_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for stage in self
            .stages
            .iter_mut()
            .chain(std::iter::once(&mut self.transition))
        {
            let (mean, var) = stage.bn.buffer_names();
            out.push((mean, &mut stage.bn.running_mean));
            out.push((var, &mut stage.bn.running_var));
        }
    }
}
