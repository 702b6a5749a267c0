//! Encoder / classification branch / detection branch.
//!
//! The encoder is a small 3D DenseNet: a stem convolution followed by
//! `num_blocks` dense blocks, each followed by average pooling. The
//! classifier flattens the embedding into two fully connected layers. The
//! decoder mirrors the encoder with a 1×1×1 transition, nearest-neighbour
//! upsampling and a dense block per stage, ending in a one-channel sigmoid
//! map the size of the input volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Convolution layers per dense block.
pub const LAYERS_PER_BLOCK: usize = 2;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Volume extents (D, H, W) in voxels.
    pub input_shape: [usize; 3],
    pub base_channels: usize,
    pub num_blocks: usize,
    /// Channels added by each convolution inside a dense block.
    pub growth: usize,
    pub downsample_factor: usize,
    pub fc_hidden: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ArchConfig {
    /// Small enough to train in seconds per epoch on one CPU core.
    pub fn desk_default() -> Self {
        ArchConfig {
            input_shape: [16, 16, 8],
            base_channels: 4,
            num_blocks: 2,
            growth: 4,
            downsample_factor: 2,
            fc_hidden: 16,
            seed: 0,
        }
    }

    /// 512×512×256 input with 5 dense blocks (embedding 16×16×8).
    pub fn paper_scale() -> Self {
        ArchConfig {
            input_shape: [512, 512, 256],
            base_channels: 16,
            num_blocks: 5,
            growth: 12,
            downsample_factor: 2,
            fc_hidden: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("base_channels", self.base_channels),
            ("num_blocks", self.num_blocks),
            ("growth", self.growth),
            ("fc_hidden", self.fc_hidden),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::config(format!("arch.{name} must be at least 1")));
            }
        }
        if self.downsample_factor < 2 {
            return Err(Error::config("arch.downsample_factor must be at least 2"));
        }
        let total = u32::try_from(self.num_blocks)
            .ok()
            .and_then(|n| self.downsample_factor.checked_pow(n))
            .ok_or_else(|| Error::config("arch downsampling overflows"))?;
        if self.input_shape.iter().any(|&s| s == 0 || s % total != 0) {
            return Err(Error::config(format!(
                "arch.input_shape {:?} must be divisible by {}^{} = {total}",
                self.input_shape, self.downsample_factor, self.num_blocks
            )));
        }
        Ok(())
    }

    pub fn embedding_channels(&self) -> usize {
        self.base_channels + self.num_blocks * LAYERS_PER_BLOCK * self.growth
    }

    pub fn embedding_spatial(&self) -> [usize; 3] {
        let total = self.downsample_factor.pow(self.num_blocks as u32);
        self.input_shape.map(|s| s / total)
    }

    pub fn embedding_len(&self) -> usize {
        self.embedding_channels() * self.embedding_spatial().iter().product::<usize>()
    }

    pub fn voxels(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shape of a network input tensor, `1×D×H×W`.
    pub fn volume_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.input_shape;
        vec![1, d, h, w]
    }

    fn layout(&self) -> [Vec<(String, Vec<usize>)>; 3] {
        let k = KERNEL;
        let conv = |name: String, c_out: usize, c_in: usize, ks: usize| {
            [
                (format!("{name}.w"), vec![c_out, c_in, ks, ks, ks]),
                (format!("{name}.b"), vec![c_out]),
            ]
        };
        let mut enc = Vec::new();
        enc.extend(conv("stem".into(), self.base_channels, 1, k));
        let mut c = self.base_channels;
        for b in 0..self.num_blocks {
            for l in 0..LAYERS_PER_BLOCK {
                enc.extend(conv(format!("enc{b}.conv{l}"), self.growth, c, k));
                c += self.growth;
            }
        }
        let cls = vec![
            ("fc1.w".to_string(), vec![self.fc_hidden, self.embedding_len()]),
            ("fc1.b".to_string(), vec![self.fc_hidden]),
            ("fc2.w".to_string(), vec![1, self.fc_hidden]),
            ("fc2.b".to_string(), vec![1]),
        ];
        let mut det = Vec::new();
        let mut c = self.embedding_channels();
        for s in 0..self.num_blocks {
            det.extend(conv(format!("dec{s}.trans"), self.base_channels, c, 1));
            c = self.base_channels;
            for l in 0..LAYERS_PER_BLOCK {
                det.extend(conv(format!("dec{s}.conv{l}"), self.growth, c, k));
                c += self.growth;
            }
        }
        det.extend(conv("head".into(), 1, c, 1));
        [enc, cls, det]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Classifier,
    Detector,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Classifier, Group::Detector];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Classifier => "classifier",
            Group::Detector => "detector",
        }
    }
}

/// One named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Encoder, classifier and detector parameters plus the architecture they
/// were built for. The three groups never share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub encoder: ParamGroup,
    pub classifier: ParamGroup,
    pub detector: ParamGroup,
}

/// Weights ~ U(−√(3/fan_in), √(3/fan_in)), biases zero.
pub fn init_params(arch: &ArchConfig) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let [enc, cls, det] = arch.layout();
    let mut build = |layout: Vec<(String, Vec<usize>)>| {
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            };
            names.push(name);
            tensors.push(t);
        }
        ParamGroup { names, tensors }
    };
    Ok(ModelParams {
        arch: arch.clone(),
        encoder: build(enc),
        classifier: build(cls),
        detector: build(det),
    })
}

impl ModelParams {
    pub fn group(&self, g: Group) -> &ParamGroup {
        match g {
            Group::Encoder => &self.encoder,
            Group::Classifier => &self.classifier,
            Group::Detector => &self.detector,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Classifier => &mut self.classifier,
            Group::Detector => &mut self.detector,
        }
    }

    pub fn count(&self) -> usize {
        Group::ALL.iter().map(|&g| self.group(g).count()).sum()
    }

    /// Records a group's tensors as graph leaves, differentiable or not.
    pub fn bind(&self, g: &mut Graph, group: Group, trainable: bool) -> Vec<Var> {
        self.group(group)
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Embedding, class probability and soft ROI map for one volume with no
    /// gradient bookkeeping.
    pub fn predict(&self, volume: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let (v, enc, cls, det) = self.bind_all_frozen(&mut g, volume);
        let o = encoder_forward(&mut g, &self.arch, v, &enc)?;
        let y = classifier_forward(&mut g, &self.arch, o, &cls)?;
        let s = decoder_forward(&mut g, &self.arch, o, &det)?;
        Ok((g.value(y).item(), g.value(s).clone()))
    }

    pub fn predict_prob(&self, volume: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(volume.clone());
        let enc = self.bind(&mut g, Group::Encoder, false);
        let cls = self.bind(&mut g, Group::Classifier, false);
        let o = encoder_forward(&mut g, &self.arch, v, &enc)?;
        let y = classifier_forward(&mut g, &self.arch, o, &cls)?;
        Ok(g.value(y).item())
    }

    pub fn predict_map(&self, volume: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(volume.clone());
        let enc = self.bind(&mut g, Group::Encoder, false);
        let det = self.bind(&mut g, Group::Detector, false);
        let o = encoder_forward(&mut g, &self.arch, v, &enc)?;
        let s = decoder_forward(&mut g, &self.arch, o, &det)?;
        Ok(g.value(s).clone())
    }

    fn bind_all_frozen(
        &self,
        g: &mut Graph,
        volume: &Tensor,
    ) -> (Var, Vec<Var>, Vec<Var>, Vec<Var>) {
        let v = g.constant(volume.clone());
        (
            v,
            self.bind(g, Group::Encoder, false),
            self.bind(g, Group::Classifier, false),
            self.bind(g, Group::Detector, false),
        )
    }
}

fn conv_act(g: &mut Graph, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
    let y = g.conv3d(x, w, 1, pad)?;
    let y = g.channel_bias(y, b)?;
    g.silu(y)
}

/// Each layer's output is concatenated onto its input.
fn dense_block(g: &mut Graph, mut x: Var, params: &[Var]) -> Result<Var> {
    for layer in params.chunks_exact(2) {
        let y = conv_act(g, x, layer[0], layer[1], KERNEL / 2)?;
        x = g.concat_channels(&[x, y])?;
    }
    Ok(x)
}

fn check_params(arch: &ArchConfig, group: usize, params: &[Var], g: &Graph) -> Result<()> {
    let layout = &arch.layout()[group];
    if layout.len() != params.len()
        || layout
            .iter()
            .zip(params)
            .any(|((_, shape), v)| g.value(*v).shape() != shape.as_slice())
    {
        return Err(Error::dim(format!(
            "parameter set does not match architecture ({} tensors given, {} expected)",
            params.len(),
            layout.len()
        )));
    }
    Ok(())
}

/// `o = f(v)`: `1×D×H×W` volume to `C×(D/s)×(H/s)×(W/s)` embedding.
pub fn encoder_forward(g: &mut Graph, arch: &ArchConfig, v: Var, params: &[Var]) -> Result<Var> {
    check_params(arch, 0, params, g)?;
    if g.value(v).shape() != arch.volume_shape().as_slice() {
        return Err(Error::dim(format!(
            "volume shape {:?} does not match arch input {:?}",
            g.value(v).shape(),
            arch.volume_shape()
        )));
    }
    let mut x = conv_act(g, v, params[0], params[1], KERNEL / 2)?;
    let per_block = 2 * LAYERS_PER_BLOCK;
    for block in params[2..].chunks_exact(per_block) {
        x = dense_block(g, x, block)?;
        x = g.avg_pool3d(x, arch.downsample_factor)?;
    }
    Ok(x)
}

/// `ỹ = σ(o)`: flatten, affine, SiLU, affine, sigmoid.
pub fn classifier_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    o: Var,
    params: &[Var],
) -> Result<Var> {
    check_params(arch, 1, params, g)?;
    check_embedding(arch, g, o)?;
    let flat = g.flatten(o)?;
    let h = g.affine(flat, params[0], params[1])?;
    let h = g.silu(h)?;
    let z = g.affine(h, params[2], params[3])?;
    g.sigmoid(z)
}

/// `s̃ = g(o)`: soft ROI map of shape `1×D×H×W`.
pub fn decoder_forward(g: &mut Graph, arch: &ArchConfig, o: Var, params: &[Var]) -> Result<Var> {
    check_params(arch, 2, params, g)?;
    check_embedding(arch, g, o)?;
    let per_stage = 2 + 2 * LAYERS_PER_BLOCK;
    let (stages, head) = params.split_at(arch.num_blocks * per_stage);
    let mut x = o;
    for stage in stages.chunks_exact(per_stage) {
        x = conv_act(g, x, stage[0], stage[1], 0)?;
        x = g.upsample_nearest3d(x, arch.downsample_factor)?;
        x = dense_block(g, x, &stage[2..])?;
    }
    let y = g.conv3d(x, head[0], 1, 0)?;
    let y = g.channel_bias(y, head[1])?;
    g.sigmoid(y)
}

fn check_embedding(arch: &ArchConfig, g: &Graph, o: Var) -> Result<()> {
    let [d, h, w] = arch.embedding_spatial();
    let expected = [arch.embedding_channels(), d, h, w];
    if g.value(o).shape() != expected {
        return Err(Error::dim(format!(
            "embedding shape {:?} does not match arch {expected:?}",
            g.value(o).shape()
        )));
    }
    Ok(())
}

/// Binary mask: voxel is 1 iff `s̃(ω) > ζ` (strict).
pub fn threshold_mask(soft: &Tensor, zeta: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::config(format!("threshold ζ = {zeta} outside [0, 1]")));
    }
    Ok(soft.data().iter().map(|&p| u8::from(p > zeta)).collect())
}
