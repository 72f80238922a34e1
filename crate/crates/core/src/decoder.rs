//! Nested dense decoder whose nodes gate their same-level features with
//! global-context attention before decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderOutput, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, ParamStore, Session};
use crate::tensor::{Float, Var};

/// How the pooled context vector is transformed before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Plain1x1,
    BottleneckLnRelu,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Plain1x1 => "plain_1x1",
            Transform::BottleneckLnRelu => "bottleneck_ln_relu",
        }
    }
}

/// Which decoder nodes carry a GCA block. Disabled nodes pass their
/// same-level features through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AllDecoder,
    EndNodes,
    Intermediates,
    TopNodes,
    Baseline,
}

impl Placement {
    pub const ALL: [Placement; 5] = [
        Placement::AllDecoder,
        Placement::EndNodes,
        Placement::Intermediates,
        Placement::TopNodes,
        Placement::Baseline,
    ];

    pub fn enabled(self, level: usize, index: usize) -> bool {
        match self {
            Placement::AllDecoder => true,
            Placement::EndNodes => level + index == STAGES - 1,
            Placement::Intermediates => level + index < STAGES - 1,
            Placement::TopNodes => level == 0,
            Placement::Baseline => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::AllDecoder => "all_decoder",
            Placement::EndNodes => "end_nodes",
            Placement::Intermediates => "intermediates",
            Placement::TopNodes => "top_nodes",
            Placement::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcaConfig {
    /// Bottleneck ratio r.
    pub ratio: usize,
    /// Intermediate gate width; `None` means `max(C_l / 2, 8)`.
    pub gate_width: Option<usize>,
    pub transform: Transform,
    pub placement: Placement,
}

impl Default for GcaConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            gate_width: None,
            transform: Transform::BottleneckLnRelu,
            placement: Placement::AllDecoder,
        }
    }
}

impl GcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Config("bottleneck ratio must be ≥ 1".into()));
        }
        if self.gate_width == Some(0) {
            return Err(Error::Config("gate width must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn gate_width_for(&self, c_l: usize) -> usize {
        self.gate_width.unwrap_or((c_l / 2).max(8))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ContextTransform {
    Plain(Conv2d),
    Bottleneck {
        down: Conv2d,
        norm: LayerNorm,
        up: Conv2d,
    },
}

/// Gated context attention for one decoder node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gca {
    /// C_l → 1 attention logits.
    pub pool: Conv2d,
    pub transform: ContextTransform,
    /// Ω(F_l) → C_int.
    pub gate_l: Conv2d,
    /// F_g → C_int.
    pub gate_g: Conv2d,
    /// C_int → 1.
    pub gate_out: Conv2d,
}

pub struct GcaOutput {
    pub theta: Var,
    pub gate: Var,
    pub attention: Var,
}

impl Gca {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_l: usize,
        c_g: usize,
        cfg: &GcaConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let pool = Conv2d::pointwise(store, &format!("{name}.pool"), c_l, 1, Init::He, rng);
        // The last transform conv starts at zero so a fresh block adds no
        // context.
        let transform = match cfg.transform {
            Transform::Plain1x1 => ContextTransform::Plain(Conv2d::pointwise(
                store,
                &format!("{name}.transform"),
                c_l,
                c_l,
                Init::Zero,
                rng,
            )),
            Transform::BottleneckLnRelu => {
                let mid = c_l.div_ceil(cfg.ratio);
                ContextTransform::Bottleneck {
                    down: Conv2d::pointwise(store, &format!("{name}.down"), c_l, mid, Init::He, rng),
                    norm: LayerNorm::new(store, &format!("{name}.norm"), mid),
                    up: Conv2d::pointwise(store, &format!("{name}.up"), mid, c_l, Init::Zero, rng),
                }
            }
        };
        let c_int = cfg.gate_width_for(c_l);
        Self {
            pool,
            transform,
            gate_l: Conv2d::pointwise(store, &format!("{name}.gate_l"), c_l, c_int, Init::He, rng),
            gate_g: Conv2d::pointwise(store, &format!("{name}.gate_g"), c_g, c_int, Init::He, rng),
            gate_out: Conv2d::pointwise(store, &format!("{name}.gate_out"), c_int, 1, Init::He, rng),
        }
    }

    /// Softmax-weighted average of `f_l` over positions. Returns the
    /// N×C×1×1 context and the N×1×H×W weights.
    pub fn context_pool<T: Float>(&self, s: &mut Session<T>, f_l: Var) -> Result<(Var, Var)> {
        let logits = self.pool.forward(s, f_l)?;
        let attn = s.graph.softmax_positions(logits)?;
        let weighted = s.graph.mul(f_l, attn)?;
        let shape = s.graph.shape(f_l);
        let positions = (shape[2] * shape[3]) as f64;
        let mean = s.graph.global_avg_pool(weighted)?;
        Ok((s.graph.scale(mean, positions), attn))
    }

    pub fn context_transform<T: Float>(&self, s: &mut Session<T>, ctx: Var) -> Result<Var> {
        match &self.transform {
            ContextTransform::Plain(c) => c.forward(s, ctx),
            ContextTransform::Bottleneck { down, norm, up } => {
                let h = down.forward(s, ctx)?;
                let h = norm.forward(s, h)?;
                let h = s.graph.relu(h);
                up.forward(s, h)
            }
        }
    }

    pub fn context_fuse<T: Float>(&self, s: &mut Session<T>, f_l: Var, ctx: Var) -> Result<Var> {
        s.graph.broadcast_add(f_l, ctx)
    }

    /// Per-pixel gate in (0, 1).
    pub fn attention_gate<T: Float>(&self, s: &mut Session<T>, fused: Var, f_g: Var) -> Result<Var> {
        let a = self.gate_l.forward(s, fused)?;
        let b = self.gate_g.forward(s, f_g)?;
        let h = s.graph.add(a, b)?;
        let h = s.graph.relu(h);
        let h = self.gate_out.forward(s, h)?;
        Ok(s.graph.sigmoid(h))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, f_l: Var, f_g: Var) -> Result<GcaOutput> {
        let (ctx, attention) = self.context_pool(s, f_l)?;
        let ctx = self.context_transform(s, ctx)?;
        let fused = self.context_fuse(s, f_l, ctx)?;
        let gate = self.attention_gate(s, fused, f_g)?;
        let theta = s.graph.mul(f_l, gate)?;
        Ok(GcaOutput {
            theta,
            gate,
            attention,
        })
    }
}

/// Decoder node `X^{level,index}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderNode {
    pub level: usize,
    pub index: usize,
    pub gca: Option<Gca>,
    pub decode: [Conv2d; 2],
    /// Channel normalization after each decode conv.
    pub norms: Option<[LayerNorm; 2]>,
}

pub struct NodeOutput {
    pub y: Var,
    pub gate: Option<Var>,
    pub f_l: Var,
    pub theta: Var,
}

impl DecoderNode {
    /// `same_level` holds `y^{i,0..j}`, `below` is `y^{i+1,j-1}`. The
    /// decode block sees the gated features next to the upsampled coarse
    /// features.
    pub fn forward<T: Float>(&self, s: &mut Session<T>, same_level: &[Var], below: Var) -> Result<NodeOutput> {
        if same_level.len() != self.index {
            return Err(Error::invalid(format!(
                "node X^{{{},{}}} expects {} same-level inputs, got {}",
                self.level,
                self.index,
                self.index,
                same_level.len()
            )));
        }
        let f_l = s.graph.concat_channels(same_level)?;
        let f_g = s.graph.upsample(below, 2)?;
        let (theta, gate) = match &self.gca {
            Some(gca) => {
                let out = gca.forward(s, f_l, f_g)?;
                (out.theta, Some(out.gate))
            }
            None => (f_l, None),
        };
        let mut h = s.graph.concat_channels(&[theta, f_g])?;
        for (k, conv) in self.decode.iter().enumerate() {
            h = conv.forward(s, h)?;
            if let Some(norms) = &self.norms {
                h = norms[k].forward(s, h)?;
            }
            h = s.graph.relu(h);
        }
        let y = h;
        Ok(NodeOutput { y, gate, f_l, theta })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    /// Ordered by increasing `index`, then `level`.
    pub nodes: Vec<DecoderNode>,
    /// One 1×1 head per top node `X^{0,1..4}`, or only `X^{0,4}` without
    /// deep supervision.
    pub heads: Vec<Conv2d>,
    pub deep_supervision: bool,
}

pub struct DecoderOutput {
    /// N×1×H×W probabilities at input resolution.
    pub map: Var,
    /// `grid[i][j]` is `y^{i,j}` (`j = 0` is the encoder stage).
    pub grid: Vec<Vec<Var>>,
    pub nodes: Vec<NodeOutput>,
}

/// `(level, index)` of every decoder node in evaluation order.
pub fn grid_nodes() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 1..STAGES {
        for i in 0..STAGES - j {
            out.push((i, j));
        }
    }
    out
}

impl Decoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        widths: &[usize; STAGES],
        cfg: &GcaConfig,
        deep_supervision: bool,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut nodes = Vec::new();
        for (i, j) in grid_nodes() {
            let c_l = j * widths[i];
            let c_g = widths[i + 1];
            let name = format!("decoder.{i}_{j}");
            let gca = cfg
                .placement
                .enabled(i, j)
                .then(|| Gca::new(store, &format!("{name}.gca"), c_l, c_g, cfg, rng));
            let w = widths[i];
            let decode = [
                Conv2d::new(store, &format!("{name}.conv0"), c_l + c_g, w, 3, 1, 1, Init::He, rng),
                Conv2d::new(store, &format!("{name}.conv1"), w, w, 3, 1, 1, Init::He, rng),
            ];
            let norms = norm.then(|| {
                [
                    LayerNorm::new(store, &format!("{name}.norm0"), w),
                    LayerNorm::new(store, &format!("{name}.norm1"), w),
                ]
            });
            nodes.push(DecoderNode {
                level: i,
                index: j,
                gca,
                decode,
                norms,
            });
        }
        let head_nodes: Vec<usize> = if deep_supervision {
            (1..STAGES).collect()
        } else {
            vec![STAGES - 1]
        };
        let heads = head_nodes
            .iter()
            .map(|j| Conv2d::pointwise(store, &format!("decoder.head_{j}"), widths[0], 1, Init::He, rng))
            .collect();
        Ok(Self {
            nodes,
            heads,
            deep_supervision,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, enc: &EncoderOutput) -> Result<DecoderOutput> {
        let mut grid: Vec<Vec<Var>> = enc.features.iter().map(|&f| vec![f]).collect();
        let mut outs = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (i, j) = (node.level, node.index);
            let below = grid[i + 1][j - 1];
            let same: Vec<Var> = grid[i][..j].to_vec();
            let out = node.forward(s, &same, below)?;
            grid[i].push(out.y);
            outs.push(out);
        }
        let first = STAGES - self.heads.len();
        let mut sum: Option<Var> = None;
        for (k, head) in self.heads.iter().enumerate() {
            let logit = head.forward(s, grid[0][first + k])?;
            let p = s.graph.sigmoid(logit);
            sum = Some(match sum {
                Some(acc) => s.graph.add(acc, p)?,
                None => p,
            });
        }
        let mean = s.graph.scale(sum.expect("at least one head"), 1.0 / self.heads.len() as f64);
        let map = s.graph.upsample(mean, 2)?;
        Ok(DecoderOutput {
            map,
            grid,
            nodes: outs,
        })
    }

    pub fn node(&self, level: usize, index: usize) -> Option<&DecoderNode> {
        self.nodes.iter().find(|n| n.level == level && n.index == index)
    }
}
