use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, ConvBlockVars, ConvSpec, GateVars, Norm, ResidualVars};
use crate::models::config::{ModelConfig, NormMode};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
enum NormIds {
    None,
    Instance { gamma: ParamId, beta: ParamId },
    /// Linear head `w -> 2C` producing `(1 + scale, shift)`.
    Adaptive { w: ParamId, b: ParamId, channels: usize },
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    spec: ConvSpec,
    w: ParamId,
    b: ParamId,
    norm: NormIds,
}

#[derive(Clone, Debug)]
struct LevelIds {
    conv_in: BlockIds,
    merge: Option<BlockIds>,
    residual: Vec<(BlockIds, BlockIds)>,
    gate: Option<[ParamId; 4]>,
}

/// Layout of the (optionally task-adaptive) self-guided generator.
///
/// The layout only records where each weight lives in a [`ParamStore`]; the
/// values themselves are passed to every forward call, so one layout serves
/// any number of parameter snapshots.
#[derive(Clone, Debug)]
pub struct Gsgn {
    config: ModelConfig,
    levels: Vec<LevelIds>,
    out_w: ParamId,
    out_b: ParamId,
    mapping: Vec<(ParamId, ParamId)>,
    adain_sites: usize,
}

struct Builder<'a, R: Rng> {
    init: Initializer<'a, R>,
    config: &'a ModelConfig,
    sites: usize,
}

impl<R: Rng> Builder<'_, R> {
    fn norm(&mut self, name: &str, channels: usize) -> Result<NormIds> {
        Ok(match self.config.norm_mode {
            NormMode::None => NormIds::None,
            NormMode::Instance => NormIds::Instance {
                gamma: self.init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
                beta: self.init.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            },
            NormMode::Adaptive => {
                self.sites += 1;
                let wd = self.config.latent_w_dim;
                NormIds::Adaptive {
                    w: self.init.constant(&format!("{name}.head.w"), &[2 * channels, wd], 0.0)?,
                    b: self.init.constant(&format!("{name}.head.b"), &[2 * channels], 0.0)?,
                    channels,
                }
            }
        })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, norm: bool) -> Result<BlockIds> {
        let spec = ConvSpec::k3(cin, cout)?;
        let w = self.init.he(&format!("{name}.w"), &spec.weight_shape(), 1.0)?;
        let b = self.init.constant(&format!("{name}.b"), &[cout], 0.0)?;
        let norm = if norm { self.norm(&format!("{name}.norm"), cout)? } else { NormIds::None };
        Ok(BlockIds { spec, w, b, norm })
    }
}

fn input_channels(level: usize) -> usize {
    3 << (2 * level)
}

impl Gsgn {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { init: Initializer::new(&mut store, rng, ""), config, sites: 0 };
        let top = config.levels;
        let mut levels = Vec::with_capacity(top + 1);
        // build top-down so parameter order follows the data flow
        for l in (0..=top).rev() {
            let c = config.width(l);
            let conv_in = b.block(&format!("level{l}.conv_in"), input_channels(l), c, true)?;
            let merge = if l < top {
                let up = config.width(l + 1) / 4;
                Some(b.block(&format!("level{l}.merge"), c + up, c, true)?)
            } else {
                None
            };
            let mut residual = Vec::new();
            for r in 0..config.blocks_per_level[l] {
                let first = b.block(&format!("level{l}.res{r}.conv1"), c, c, true)?;
                let second = b.block(&format!("level{l}.res{r}.conv2"), c, c, true)?;
                residual.push((first, second));
            }
            let gate = if l == top && config.use_global_features {
                let h = config.gate_hidden();
                let fc1_w = b.init.he(&format!("level{l}.gate.fc1.w"), &[h, c], 1.0)?;
                let fc1_b = b.init.constant(&format!("level{l}.gate.fc1.b"), &[h], 0.0)?;
                let fc2_w = b.init.he(&format!("level{l}.gate.fc2.w"), &[c, h], 1.0)?;
                let fc2_b = b.init.constant(&format!("level{l}.gate.fc2.b"), &[c], 0.0)?;
                Some([fc1_w, fc1_b, fc2_w, fc2_b])
            } else {
                None
            };
            levels.push(LevelIds { conv_in, merge, residual, gate });
        }
        levels.reverse();
        let out_spec = ConvSpec::k3(config.base_channels, 3)?;
        let out_w = if config.zero_output_init {
            b.init.constant("out.w", &out_spec.weight_shape(), 0.0)?
        } else {
            b.init.he("out.w", &out_spec.weight_shape(), 0.1)?
        };
        let out_b = b.init.constant("out.b", &[3], 0.0)?;
        let mut mapping = Vec::new();
        if config.is_adaptive() {
            let mut din = config.task_count;
            for i in 0..config.mapping_depth {
                let w = b.init.he(&format!("mapping.fc{i}.w"), &[config.latent_w_dim, din], 1.0)?;
                let bias = b.init.constant(&format!("mapping.fc{i}.b"), &[config.latent_w_dim], 0.0)?;
                mapping.push((w, bias));
                din = config.latent_w_dim;
            }
        }
        let adain_sites = b.sites;
        Ok((Self { config: config.clone(), levels, out_w, out_b, mapping, adain_sites }, store))
    }

    /// Layout for `config` with the values of `params`, reordered to match the layout.
    pub fn with_params(config: &ModelConfig, params: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, mut fresh) = Self::build(config, &mut rng)?;
        fresh.copy_from(params).map_err(|e| Error::Checkpoint(format!("generator parameters: {e}")))?;
        Ok((model, fresh))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adain_site_count(&self) -> usize {
        self.adain_sites
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let (n, c, h, w) = g.value(x).nchw()?;
        let m = self.config.size_multiple();
        if c != 3 {
            return Err(Error::InvalidShape {
                op: "gsgn_forward",
                shape: g.shape(x).to_vec(),
                reason: "expected 3 channels".into(),
            });
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidShape {
                op: "gsgn_forward",
                shape: g.shape(x).to_vec(),
                reason: format!("height and width must be divisible by {m}"),
            });
        }
        Ok(n)
    }

    /// Mapping network: `z (N, K) -> w (N, latent_w_dim)`.
    pub fn map_latent<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        if !self.config.is_adaptive() {
            return Err(Error::InvalidArgument("model is not task adaptive".into()));
        }
        let zs = g.shape(z);
        if zs.len() != 2 || zs[1] != self.config.task_count {
            return Err(Error::ShapeMismatch {
                op: "mapping_forward",
                lhs: zs.to_vec(),
                rhs: vec![zs.first().copied().unwrap_or(0), self.config.task_count],
            });
        }
        let mut h = z;
        for &(w, b) in &self.mapping {
            h = layers::fully_connected(g, h, p.var(w), p.var(b))?;
            h = layers::leaky_relu(g, h, self.config.slope)?;
        }
        Ok(h)
    }

    /// Per-site `(scale, shift)` for a mapped latent `w`, in site order.
    pub fn adain_params<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, w: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(self.adain_sites);
        for norm in self.norm_sites() {
            if let NormIds::Adaptive { w: hw, b: hb, channels } = norm {
                out.push(adain_head(g, p, w, hw, hb, channels)?);
            }
        }
        Ok(out)
    }

    fn norm_sites(&self) -> Vec<NormIds> {
        let mut sites = Vec::new();
        for level in self.levels.iter().rev() {
            sites.push(level.conv_in.norm);
            if let Some(m) = &level.merge {
                sites.push(m.norm);
            }
            for (a, b) in &level.residual {
                sites.push(a.norm);
                sites.push(b.norm);
            }
        }
        sites
    }

    /// Enhanced image before clamping. `z` is `(N, K)` and required exactly
    /// when the model is task adaptive.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, z: Option<Var>) -> Result<Var> {
        let n = self.check_input(g, x)?;
        let cfg = &self.config;
        let latent = match (cfg.is_adaptive(), z) {
            (true, Some(z)) => {
                if g.shape(z).first() != Some(&n) {
                    return Err(Error::ShapeMismatch {
                        op: "gsgn_forward style",
                        lhs: g.shape(x).to_vec(),
                        rhs: g.shape(z).to_vec(),
                    });
                }
                Some(self.map_latent(g, p, z)?)
            }
            (true, None) => {
                return Err(Error::InvalidArgument("task-adaptive model needs a style vector".into()))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument("model is not task adaptive; drop the style".into()))
            }
            (false, None) => None,
        };
        let resolve = |g: &mut Graph<T>, ids: &BlockIds| -> Result<ConvBlockVars> {
            let norm = match ids.norm {
                NormIds::None => Norm::None,
                NormIds::Instance { gamma, beta } => Norm::Instance { gamma: p.var(gamma), beta: p.var(beta) },
                NormIds::Adaptive { w, b, channels } => {
                    let lw = latent.expect("latent present in adaptive mode");
                    let (scale, shift) = adain_head(g, p, lw, w, b, channels)?;
                    Norm::Adaptive { scale, shift }
                }
            };
            Ok(ConvBlockVars { spec: ids.spec, w: p.var(ids.w), b: p.var(ids.b), norm })
        };

        let mut inputs = vec![x];
        for _ in 0..cfg.levels {
            let last = *inputs.last().expect("non-empty");
            inputs.push(g.shuffle(last)?);
        }
        let mut upper: Option<Var> = None;
        for l in (0..=cfg.levels).rev() {
            let ids = &self.levels[l];
            let blk = resolve(g, &ids.conv_in)?;
            let mut h = layers::conv_block(g, inputs[l], &blk, cfg.slope, cfg.eps)?;
            if let (Some(m), Some(up)) = (&ids.merge, upper) {
                let up = g.unshuffle(up)?;
                let cat = g.concat_channels(h, up)?;
                let blk = resolve(g, m)?;
                h = layers::conv_block(g, cat, &blk, cfg.slope, cfg.eps)?;
            }
            for (a, b) in &ids.residual {
                let block = ResidualVars { first: resolve(g, a)?, second: resolve(g, b)? };
                h = layers::residual_block(g, h, &block, cfg.slope, cfg.eps)?;
            }
            if let Some([w1, b1, w2, b2]) = ids.gate {
                let gate = GateVars { fc1_w: p.var(w1), fc1_b: p.var(b1), fc2_w: p.var(w2), fc2_b: p.var(b2) };
                h = layers::global_feature_gate(g, h, &gate, cfg.slope)?;
            }
            upper = Some(h);
        }
        let feats = upper.expect("at least one level");
        let correction = g.conv2d(feats, p.var(self.out_w), Some(p.var(self.out_b)))?;
        if cfg.global_residual {
            g.add(x, correction)
        } else {
            Ok(correction)
        }
    }

    /// Inference: forward without gradients, clamped to `[0, 1]`.
    pub fn infer(&self, params: &ParamStore, x: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let zv = z.map(|z| g.constant(z.clone())).transpose()?;
        let y = self.forward(&mut g, &p, xv, zv)?;
        let y = g.clamp(y, 0.0, 1.0)?;
        Ok(g.value(y).clone())
    }

    /// Mapped latent `w` for each row of `z`.
    pub fn latent(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false)?;
        let zv = g.constant(z.clone())?;
        let w = self.map_latent(&mut g, &p, zv)?;
        Ok(g.value(w).clone())
    }
}

fn adain_head<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    latent: Var,
    w: ParamId,
    b: ParamId,
    channels: usize,
) -> Result<(Var, Var)> {
    let h = layers::fully_connected(g, latent, p.var(w), p.var(b))?;
    let ds = g.narrow(h, 0, channels)?;
    let scale = g.add_scalar(ds, 1.0)?;
    let shift = g.narrow(h, channels, channels)?;
    Ok((scale, shift))
}

/// Exact number of scalar learnable parameters of a generator.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, store) = Gsgn::build(config, &mut rng)?;
    Ok(store.scalar_count())
}
