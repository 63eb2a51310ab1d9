//! Parametric components: feature generators, classifier heads, the FC head
//! feeding the fused classifier, the label GCN and the label embedding.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, ScidaError};
use crate::nn::{
    avg_pool, join, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, Conv3x3,
    Linear, Module, Param, SampleNorm, SampleNormCache, Scalar,
};

/// Architecture hyperparameters shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Input image side length in pixels.
    pub side: usize,
    /// Average-pooling factor applied to the input before the conv blocks.
    pub input_pool: usize,
    pub channels: [usize; 4],
    /// Feature width F of generator outputs and of f_FC.
    pub feature_dim: usize,
    /// Hidden width of the two-layer classifier heads.
    pub head_hidden: usize,
    /// Label embedding width d.
    pub embed_dim: usize,
    /// Hidden width of the GCN; `4 * embed_dim` by default.
    pub gcn_hidden: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            side: 64,
            input_pool: 2,
            channels: [8, 16, 32, 32],
            feature_dim: 128,
            head_hidden: 64,
            embed_dim: 64,
            gcn_hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ScidaError::Config(m));
        if self.num_classes == 0 || self.feature_dim == 0 || self.embed_dim == 0 {
            return cfg("class count, feature width and embedding width must be positive".into());
        }
        if self.input_pool == 0 || self.side % (self.input_pool * 16) != 0 {
            return cfg(format!(
                "image side {} must be divisible by 16 * input_pool ({})",
                self.side,
                16 * self.input_pool
            ));
        }
        if self.channels.contains(&0) || self.head_hidden == 0 || self.gcn_hidden == 0 {
            return cfg("layer widths must be positive".into());
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let s = self.side / self.input_pool / 16;
        s * s * self.channels[3]
    }
}

/// Which feature generator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Common,
    Target,
}

/// Which DWC classifier head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    C1,
    C2,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<T> {
    conv: Conv3x3<T>,
    norm: SampleNorm<T>,
}

struct BlockTape<T> {
    in_dim: (usize, usize, usize, usize),
    cols: Array2<T>,
    norm: SampleNormCache<T>,
    pre_act: Array4<T>,
    argmax: Vec<usize>,
}

/// Everything [`ConvBackbone::backward`] needs from a forward pass.
pub struct BackboneTape<T> {
    blocks: Vec<BlockTape<T>>,
    flat: Array2<T>,
    proj_pre: Array2<T>,
}

/// Desk-scale feature generator: input pooling, four conv-norm-LeakyReLU-maxpool
/// blocks, flatten, then a linear projection to the feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone<T> {
    side: usize,
    input_pool: usize,
    blocks: Vec<ConvBlock<T>>,
    proj: Linear<T>,
}

impl<T: Scalar> ConvBackbone<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut in_ch = 3;
        let blocks = cfg
            .channels
            .iter()
            .map(|&out_ch| {
                let block = ConvBlock {
                    conv: Conv3x3::new(in_ch, out_ch, rng),
                    norm: SampleNorm::new(out_ch),
                };
                in_ch = out_ch;
                block
            })
            .collect();
        Self {
            side: cfg.side,
            input_pool: cfg.input_pool,
            blocks,
            proj: Linear::new(cfg.flat_dim(), cfg.feature_dim, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.out_dim()
    }

    fn check_images(&self, images: &Array4<T>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if h != self.side || w != self.side || c != 3 {
            return shape_err(format!(
                "generator expects N x {s} x {s} x 3 images, got {h} x {w} x {c}",
                s = self.side
            ));
        }
        Ok(())
    }

    pub fn forward(&self, images: &Array4<T>) -> Result<(Array2<T>, BackboneTape<T>)> {
        self.check_images(images)?;
        let mut x = if self.input_pool > 1 {
            avg_pool(images, self.input_pool)
        } else {
            images.to_owned()
        };
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let in_dim = x.dim();
            let (conv_out, cols) = block.conv.forward(&x)?;
            let (normed, norm) = block.norm.forward(&conv_out);
            let act = leaky_relu(&normed);
            let (pooled, argmax) = max_pool2(&act);
            tapes.push(BlockTape {
                in_dim,
                cols,
                norm,
                pre_act: normed,
                argmax,
            });
            x = pooled;
        }
        let n = x.dim().0;
        let flat_len = x.len() / n.max(1);
        let flat = x
            .into_shape_with_order((n, flat_len))
            .expect("contiguous block output");
        let proj_pre = self.proj.forward(&flat)?;
        let out = leaky_relu(&proj_pre);
        Ok((
            out,
            BackboneTape {
                blocks: tapes,
                flat,
                proj_pre,
            },
        ))
    }

    /// Forward pass without keeping the tape.
    pub fn features(&self, images: &Array4<T>) -> Result<Array2<T>> {
        self.forward(images).map(|(f, _)| f)
    }

    /// Accumulates parameter gradients. The image gradient is not needed by
    /// any caller, so the first block skips its input gradient.
    pub fn backward(&mut self, tape: BackboneTape<T>, dfeat: &Array2<T>) {
        let dpre = leaky_relu_backward(&tape.proj_pre, dfeat);
        let dflat = self.proj.backward(&tape.flat, &dpre);
        let last = tape.blocks.last().expect("at least one block");
        let (n, h, w, _) = last.in_dim;
        let c = self.blocks.last().expect("block").conv.out_channels();
        let mut dx = dflat
            .into_shape_with_order((n, h / 2, w / 2, c))
            .expect("flat gradient shape");
        for (i, (block, bt)) in self.blocks.iter_mut().zip(tape.blocks).enumerate().rev() {
            let (bn, bh, bw, _) = bt.in_dim;
            let act_dim = (bn, bh, bw, block.conv.out_channels());
            let dact = max_pool2_backward(&bt.argmax, act_dim, &dx);
            let dnormed = leaky_relu_backward(&bt.pre_act, &dact);
            let dconv = block.norm.backward(&bt.norm, &dnormed);
            if i == 0 {
                accumulate_conv_param_grads(&mut block.conv, &bt.cols, bt.in_dim, &dconv);
            } else {
                dx = block.conv.backward(&bt.cols, bt.in_dim, &dconv);
            }
        }
    }
}

fn accumulate_conv_param_grads<T: Scalar>(
    conv: &mut Conv3x3<T>,
    cols: &Array2<T>,
    in_dim: (usize, usize, usize, usize),
    dy: &Array4<T>,
) {
    let (n, h, w, _) = in_dim;
    let dy2 = dy
        .view()
        .into_shape_with_order((n * h * w, conv.out_channels()))
        .expect("contiguous");
    conv.weight.grad += &cols.t().dot(&dy2).into_dyn();
    conv.bias.grad += &dy2.sum_axis(Axis(0)).into_dyn();
}

impl<T: Scalar> Module<T> for ConvBackbone<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.collect_params(&join(prefix, &format!("block{i}.conv")), out);
            b.norm.collect_params(&join(prefix, &format!("block{i}.norm")), out);
        }
        self.proj.collect_params(&join(prefix, "proj"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.collect_params_mut(&join(prefix, &format!("block{i}.conv")), out);
            b.norm.collect_params_mut(&join(prefix, &format!("block{i}.norm")), out);
        }
        self.proj.collect_params_mut(&join(prefix, "proj"), out);
    }
}

pub struct MlpTape<T> {
    input: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

/// Two fully connected layers with a LeakyReLU between them. Used for the
/// classifiers C1/C2 (F -> hidden -> K) and the FC head (F -> F -> F).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

impl<T: Scalar> Mlp2<T> {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: Linear::new(in_dim, hidden, rng),
            second: Linear::new(hidden, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim()
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, MlpTape<T>)> {
        let hidden_pre = self.first.forward(x)?;
        let hidden = leaky_relu(&hidden_pre);
        let out = self.second.forward(&hidden)?;
        Ok((
            out,
            MlpTape {
                input: x.clone(),
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, tape: &MlpTape<T>, dy: &Array2<T>) -> Array2<T> {
        let dh = self.second.backward(&tape.hidden, dy);
        let dpre = leaky_relu_backward(&tape.hidden_pre, &dh);
        self.first.backward(&tape.input, &dpre)
    }
}

impl<T: Scalar> Module<T> for Mlp2<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.first.collect_params(&join(prefix, "fc0"), out);
        self.second.collect_params(&join(prefix, "fc1"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.first.collect_params_mut(&join(prefix, "fc0"), out);
        self.second.collect_params_mut(&join(prefix, "fc1"), out);
    }
}

/// Whether the last GCN layer applies the LeakyReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LastLayer {
    Activated,
    Linear,
}

/// Intermediate values of a GCN forward pass.
pub struct GcnTape<T> {
    /// `A H^(l)` for each layer.
    propagated: Vec<Array2<T>>,
    /// `A H^(l) W^(l)` before the activation.
    pre: Vec<Array2<T>>,
    last: LastLayer,
}

/// Stacked graph convolutions `H^(l+1) = LeakyReLU(A H^(l) W^(l))`.
pub fn gcn_forward<T: Scalar>(
    embedding: &Array2<T>,
    adjacency: &Array2<T>,
    weights: &[Array2<T>],
    last: LastLayer,
) -> Result<(Array2<T>, GcnTape<T>)> {
    let k = embedding.nrows();
    if adjacency.dim() != (k, k) {
        return shape_err(format!(
            "adjacency is {:?} but the embedding has {k} labels",
            adjacency.dim()
        ));
    }
    if weights.is_empty() {
        return shape_err("GCN needs at least one layer");
    }
    let mut h = embedding.to_owned();
    let mut propagated = Vec::with_capacity(weights.len());
    let mut pres = Vec::with_capacity(weights.len());
    for (l, w) in weights.iter().enumerate() {
        if h.ncols() != w.nrows() {
            return shape_err(format!(
                "GCN layer {l} expects width {}, got {}",
                w.nrows(),
                h.ncols()
            ));
        }
        let ah = adjacency.dot(&h);
        let pre = ah.dot(w);
        let is_last = l + 1 == weights.len();
        h = if is_last && last == LastLayer::Linear {
            pre.clone()
        } else {
            leaky_relu(&pre)
        };
        propagated.push(ah);
        pres.push(pre);
    }
    Ok((
        h,
        GcnTape {
            propagated,
            pre: pres,
            last,
        },
    ))
}

/// Weight gradients of [`gcn_forward`] given the output gradient.
pub fn gcn_backward<T: Scalar>(
    adjacency: &Array2<T>,
    weights: &[Array2<T>],
    tape: &GcnTape<T>,
    dout: &Array2<T>,
) -> Vec<Array2<T>> {
    let mut grads = vec![Array2::zeros((0, 0)); weights.len()];
    let mut dh = dout.clone();
    for l in (0..weights.len()).rev() {
        let is_last = l + 1 == weights.len();
        let dpre = if is_last && tape.last == LastLayer::Linear {
            dh
        } else {
            leaky_relu_backward(&tape.pre[l], &dh)
        };
        grads[l] = tape.propagated[l].t().dot(&dpre);
        let dah = dpre.dot(&weights[l].t());
        dh = adjacency.t().dot(&dah);
    }
    grads
}

/// Label GCN with learnable layer weights; the embedding is fixed input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gcn<T> {
    pub weights: Vec<Param<T>>,
}

impl<T: Scalar> Gcn<T> {
    /// Two layers d -> hidden -> F, Uniform(±1/sqrt(out)) init.
    pub fn new(embed_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = [(embed_dim, hidden), (hidden, out_dim)];
        let weights = dims
            .iter()
            .map(|&(i, o)| {
                let bound = 1.0 / (o as f64).sqrt();
                let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("bound");
                Param::new(
                    Array2::from_shape_simple_fn((i, o), || T::of(dist.sample(rng))).into_dyn(),
                )
            })
            .collect();
        Self { weights }
    }

    fn weight_arrays(&self) -> Vec<Array2<T>> {
        self.weights
            .iter()
            .map(|p| crate::nn::view2(p).to_owned())
            .collect()
    }

    pub fn forward(&self, embedding: &LabelEmbedding<T>, adjacency: &Array2<T>) -> Result<(Array2<T>, GcnTape<T>)> {
        gcn_forward(&embedding.matrix, adjacency, &self.weight_arrays(), LastLayer::Linear)
    }

    pub fn backward(&mut self, adjacency: &Array2<T>, tape: &GcnTape<T>, dout: &Array2<T>) {
        let grads = gcn_backward(adjacency, &self.weight_arrays(), tape, dout);
        for (p, g) in self.weights.iter_mut().zip(grads) {
            p.grad += &g.into_dyn();
        }
    }
}

impl<T: Scalar> Module<T> for Gcn<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, p) in self.weights.iter().enumerate() {
            out.push((join(prefix, &format!("w{i}")), p));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, p) in self.weights.iter_mut().enumerate() {
            out.push((join(prefix, &format!("w{i}")), p));
        }
    }
}

/// Scalar-product layer: `logits[b, i] = <gcn_out[i], f_fc[b]>`.
pub fn fuse<T: Scalar>(f_fc: &Array2<T>, gcn_out: &Array2<T>) -> Result<Array2<T>> {
    if f_fc.ncols() != gcn_out.ncols() {
        return shape_err(format!(
            "f_FC has width {} but GCN output has width {}",
            f_fc.ncols(),
            gcn_out.ncols()
        ));
    }
    Ok(f_fc.dot(&gcn_out.t()))
}

/// Gradients of [`fuse`] with respect to `(f_fc, gcn_out)`.
pub fn fuse_backward<T: Scalar>(
    f_fc: &Array2<T>,
    gcn_out: &Array2<T>,
    dlogits: &Array2<T>,
) -> (Array2<T>, Array2<T>) {
    (dlogits.dot(gcn_out), dlogits.t().dot(f_fc))
}

/// K x d label embedding, the GCN's input node features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding<T> {
    pub matrix: Array2<T>,
}

impl<T: Scalar> LabelEmbedding<T> {
    /// Seeded Gaussian rows scaled to unit L2 norm.
    pub fn seeded(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(ScidaError::Config(
                "label embedding needs K >= 1 and d >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::<f64>::from_shape_simple_fn((num_classes, dim), || {
            StandardNormal.sample(&mut rng)
        });
        normalize_rows(&mut m);
        Ok(Self {
            matrix: m.mapv(T::of),
        })
    }

    /// Builds rows from a whitespace-separated word-vector text file
    /// (`token v1 v2 ...` per line). Multi-word category names average their
    /// lower-cased tokens; rows are then unit-normalized.
    pub fn from_word_vectors(path: &Path, categories: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScidaError::io(path, e))?;
        let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
            let vals = vals.map_err(|e| {
                ScidaError::Load(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            table.insert(token.to_lowercase(), vals);
        }
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| ScidaError::Load(format!("{} has no vectors", path.display())))?;
        let mut m = Array2::<f64>::zeros((categories.len(), dim));
        for (i, cat) in categories.iter().enumerate() {
            let tokens: Vec<String> = cat
                .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
                .collect();
            for t in &tokens {
                let v = table.get(t).ok_or_else(|| {
                    ScidaError::Load(format!("no word vector for token '{t}' of category '{cat}'"))
                })?;
                if v.len() != dim {
                    return Err(ScidaError::Load(format!("vector for '{t}' has wrong width")));
                }
                for (dst, &x) in m.row_mut(i).iter_mut().zip(v) {
                    *dst += x / tokens.len() as f64;
                }
            }
        }
        normalize_rows(&mut m);
        Ok(Self {
            matrix: m.mapv(T::of),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Parameter groups that the training steps update selectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    GCm,
    C1,
    C2,
    GT,
    Fc,
    Gcn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::GCm,
        ParamGroup::C1,
        ParamGroup::C2,
        ParamGroup::GT,
        ParamGroup::Fc,
        ParamGroup::Gcn,
    ];
    pub const DWC: [ParamGroup; 3] = [ParamGroup::GCm, ParamGroup::C1, ParamGroup::C2];
    pub const LWC: [ParamGroup; 3] = [ParamGroup::GT, ParamGroup::Fc, ParamGroup::Gcn];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::GCm => "g_cm",
            ParamGroup::C1 => "c1",
            ParamGroup::C2 => "c2",
            ParamGroup::GT => "g_t",
            ParamGroup::Fc => "fc",
            ParamGroup::Gcn => "gcn",
        }
    }
}

/// All trainable parameters of both branches plus the fixed label embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub g_cm: ConvBackbone<T>,
    pub c1: Mlp2<T>,
    pub c2: Mlp2<T>,
    pub g_t: ConvBackbone<T>,
    pub fc: Mlp2<T>,
    pub gcn: Gcn<T>,
    pub embedding: LabelEmbedding<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Every component draws from its own ChaCha stream of `seed`, so C1 and
    /// C2 start from different weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        let k = config.num_classes;
        let f = config.feature_dim;
        Ok(Self {
            g_cm: ConvBackbone::new(&config, &mut stream(1)),
            c1: Mlp2::new(f, config.head_hidden, k, &mut stream(2)),
            c2: Mlp2::new(f, config.head_hidden, k, &mut stream(3)),
            g_t: ConvBackbone::new(&config, &mut stream(4)),
            fc: Mlp2::new(f, f, f, &mut stream(5)),
            gcn: Gcn::new(config.embed_dim, config.gcn_hidden, f, &mut stream(6)),
            embedding: LabelEmbedding::seeded(k, config.embed_dim, seed ^ 0x5c1d_a0e3)?,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn generator(&self, which: Generator) -> &ConvBackbone<T> {
        match which {
            Generator::Common => &self.g_cm,
            Generator::Target => &self.g_t,
        }
    }

    pub fn classifier(&self, which: Classifier) -> &Mlp2<T> {
        match which {
            Classifier::C1 => &self.c1,
            Classifier::C2 => &self.c2,
        }
    }

    pub fn group(&self, g: ParamGroup) -> &dyn Module<T> {
        match g {
            ParamGroup::GCm => &self.g_cm,
            ParamGroup::C1 => &self.c1,
            ParamGroup::C2 => &self.c2,
            ParamGroup::GT => &self.g_t,
            ParamGroup::Fc => &self.fc,
            ParamGroup::Gcn => &self.gcn,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut dyn Module<T> {
        match g {
            ParamGroup::GCm => &mut self.g_cm,
            ParamGroup::C1 => &mut self.c1,
            ParamGroup::C2 => &mut self.c2,
            ParamGroup::GT => &mut self.g_t,
            ParamGroup::Fc => &mut self.fc,
            ParamGroup::Gcn => &mut self.gcn,
        }
    }

    pub fn group_hashes(&self) -> BTreeMap<ParamGroup, String> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.group(g).param_hash()))
            .collect()
    }

    pub fn zero_grad_all(&mut self) {
        for g in ParamGroup::ALL {
            self.group_mut(g).zero_grad();
        }
    }
}

impl<T: Scalar> Module<T> for ModelState<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.g_cm.collect_params(&join(prefix, "g_cm"), out);
        self.c1.collect_params(&join(prefix, "c1"), out);
        self.c2.collect_params(&join(prefix, "c2"), out);
        self.g_t.collect_params(&join(prefix, "g_t"), out);
        self.fc.collect_params(&join(prefix, "fc"), out);
        self.gcn.collect_params(&join(prefix, "gcn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.g_cm.collect_params_mut(&join(prefix, "g_cm"), out);
        self.c1.collect_params_mut(&join(prefix, "c1"), out);
        self.c2.collect_params_mut(&join(prefix, "c2"), out);
        self.g_t.collect_params_mut(&join(prefix, "g_t"), out);
        self.fc.collect_params_mut(&join(prefix, "fc"), out);
        self.gcn.collect_params_mut(&join(prefix, "gcn"), out);
    }
}

/// Features from one of the two generators.
pub fn feature_forward<T: Scalar>(state: &ModelState<T>, which: Generator, images: &Array4<T>) -> Result<Array2<T>> {
    state.generator(which).features(images)
}

/// Raw logits of C1 or C2; probabilities are the elementwise sigmoid.
pub fn classify<T: Scalar>(state: &ModelState<T>, which: Classifier, features: &Array2<T>) -> Result<Array2<T>> {
    let head = state.classifier(which);
    if features.ncols() != head.in_dim() {
        return shape_err(format!(
            "classifier expects {} features, got {}",
            head.in_dim(),
            features.ncols()
        ));
    }
    head.forward(features).map(|(l, _)| l)
}
