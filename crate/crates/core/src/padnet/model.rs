use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{patchify, DenoiseItem, NoisePrediction, TokenLayout, TokenSeq};
use super::{concat_condition, detokenize, PadConfig, PadnetError, ParamGroup, ParamStore, PerModality};
use crate::diffusion::{combined_loss, ddpm_loss, LossWeights};
use crate::numcore::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockIds {
    ada: Lin,
    qkv: Lin,
    proj: Lin,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Ids {
    img_tok: Lin,
    act_tok: Lin,
    depth_tok: Option<Lin>,
    pose_enc1: Lin,
    pose_enc2: Lin,
    pos_emb: usize,
    t_fc1: Lin,
    t_fc2: Lin,
    instr_emb: usize,
    blocks: Vec<BlockIds>,
    final_ada: Lin,
    head_img: Lin,
    head_act: Lin,
    head_depth: Option<Lin>,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    FanIn(usize),
}

struct Builder<'a, S> {
    store: ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn tensor(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::FanIn(f) => Tensor::randn(shape, 1.0 / (f as f64).sqrt(), self.rng),
        };
        self.store.push(name, group, t)
    }

    fn lin(&mut self, name: &str, group: ParamGroup, d_in: usize, d_out: usize, init: Init) -> Lin {
        let w = self.tensor(format!("{name}.w"), group, &[d_in, d_out], init);
        let b = self.tensor(format!("{name}.b"), group, &[d_out], Init::Zero);
        Lin { w, b }
    }
}

/// Sinusoidal features of a timestep: cosines then sines over `dim / 2`
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).cos()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out
}

/// Parameter handles bound into one graph, in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn w(&self, l: Lin) -> (Var, Var) {
        (self.vars[l.w], self.vars[l.b])
    }
}

/// Raw network outputs of one batch. Action and depth outputs only cover the
/// rows listed in `action_rows` / `depth_rows`.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[B, T_I, p^2 k c]`
    pub image: Var,
    /// `[B_A, k pose_dim]`
    pub action: Option<Var>,
    /// `[B_E, T_E, p_E^2 k]`
    pub depth: Option<Var>,
    pub action_rows: Vec<usize>,
    pub depth_rows: Vec<usize>,
}

/// Loss node and per-modality values of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub per_modality: PerModality<Option<f64>>,
}

/// The network: configuration, parameter layout and parameter values.
#[derive(Debug, Clone)]
pub struct PadNet<S> {
    cfg: PadConfig,
    ids: Ids,
    params: ParamStore<S>,
}

/// 2-D sine/cosine features of a grid coordinate: the first half of the
/// width encodes `y`, the second half `x`.
fn sincos_2d(h: usize, y: f64, x: f64) -> Vec<f64> {
    let q = h / 4;
    let mut v = vec![0.0; h];
    for (half, pos) in [(0, y), (1, x)] {
        for k in 0..q {
            let omega = 1.0 / 10_000f64.powf(k as f64 / q.max(1) as f64);
            v[half * 2 * q + k] = (pos * omega).sin();
            v[half * 2 * q + q + k] = (pos * omega).cos();
        }
    }
    v
}

/// Starting values of the learned position embeddings. Image tokens get
/// the 2-D sin/cos pattern of their patch, depth tokens the pattern of the
/// image location they cover, and the action token a point just off the grid.
fn position_table<S: Scalar>(cfg: &PadConfig) -> Result<Tensor<S>, PadnetError> {
    let h = cfg.hidden;
    let counts = cfg.count_tokens();
    let gi = cfg.latent_size / cfg.patch_i;
    let mut data = Vec::with_capacity(counts.total * h);
    for i in 0..counts.image {
        data.extend(sincos_2d(h, (i / gi) as f64, (i % gi) as f64));
    }
    data.extend(sincos_2d(h, -1.0, -1.0));
    if counts.depth > 0 {
        let gd = cfg.depth_size / cfg.patch_e;
        let to_img = |r: usize| (r as f64 + 0.5) * gi as f64 / gd as f64 - 0.5;
        for i in 0..counts.depth {
            data.extend(sincos_2d(h, to_img(i / gd), to_img(i % gd)));
        }
    }
    Ok(Tensor::new(&[counts.total, h], data.into_iter().map(S::lit).collect())?)
}

impl<S: Scalar> PadNet<S> {
    /// Deterministic initialization. Instruction embeddings, every adaLN
    /// projection, the second pose-encoder layer and all output heads start
    /// at zero; the image tokenizer repeats one base projection across the
    /// `k + 1` channel groups.
    pub fn init(cfg: &PadConfig, seed: u64) -> Result<Self, PadnetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let h = cfg.hidden;
        let c = cfg.latent_channels;
        let p = cfg.patch_i;
        use ParamGroup::{Action, Depth, Shared};

        let base = Tensor::<S>::randn(&[p * p * c, h], 1.0 / (cfg.image_token_in() as f64).sqrt(), b.rng);
        let mut w = Vec::with_capacity(cfg.image_token_in() * h);
        for _ in 0..=cfg.k {
            w.extend_from_slice(base.data());
        }
        let img_w = b
            .store
            .push("img_tok.w", Shared, Tensor::new(&[cfg.image_token_in(), h], w)?);
        let img_b = b.tensor("img_tok.b".into(), Shared, &[h], Init::Zero);
        let img_tok = Lin { w: img_w, b: img_b };

        let pd = cfg.pose_dim;
        let pose_enc1 = b.lin("pose_enc.fc1", Action, pd, h, Init::FanIn(pd));
        let pose_enc2 = b.lin("pose_enc.fc2", Action, h, pd, Init::Zero);
        let act_tok = b.lin("act_tok", Action, cfg.action_in(), h, Init::FanIn(cfg.action_in()));
        let depth_tok = cfg.depth_enabled.then(|| {
            let d_in = cfg.depth_token_in();
            b.lin("depth_tok", Depth, d_in, h, Init::FanIn(d_in))
        });
        let pos_emb = b.store.push("pos_emb", Shared, position_table(cfg)?);
        let t_fc1 = b.lin("t_embed.fc1", Shared, cfg.time_dim, h, Init::FanIn(cfg.time_dim));
        let t_fc2 = b.lin("t_embed.fc2", Shared, h, h, Init::FanIn(h));
        let instr_emb = b.tensor("instr_emb".into(), Shared, &[cfg.instr_vocab_size, h], Init::Zero);

        let hm = h * cfg.mlp_ratio;
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockIds {
                ada: b.lin(&format!("blocks.{i}.ada"), Shared, h, 6 * h, Init::Zero),
                qkv: b.lin(&format!("blocks.{i}.qkv"), Shared, h, 3 * h, Init::FanIn(h)),
                proj: b.lin(&format!("blocks.{i}.proj"), Shared, h, h, Init::FanIn(h)),
                fc1: b.lin(&format!("blocks.{i}.fc1"), Shared, h, hm, Init::FanIn(h)),
                fc2: b.lin(&format!("blocks.{i}.fc2"), Shared, hm, h, Init::FanIn(hm)),
            })
            .collect();
        let final_ada = b.lin("final.ada", Shared, h, 2 * h, Init::Zero);
        let head_img = b.lin("head_img", Shared, h, cfg.image_token_out(), Init::Zero);
        let head_act = b.lin("head_act", Action, h, cfg.k * pd, Init::Zero);
        let head_depth = cfg
            .depth_enabled
            .then(|| b.lin("head_depth", Depth, h, cfg.depth_token_out(), Init::Zero));

        let ids = Ids {
            img_tok,
            act_tok,
            depth_tok,
            pose_enc1,
            pose_enc2,
            pos_emb,
            t_fc1,
            t_fc2,
            instr_emb,
            blocks,
            final_ada,
            head_img,
            head_act,
            head_depth,
        };
        Ok(Self {
            cfg: cfg.clone(),
            ids,
            params: b.store,
        })
    }

    /// Rebuilds a network around existing parameters, checking every name
    /// and shape against the configuration.
    pub fn from_params(cfg: &PadConfig, mut params: ParamStore<S>) -> Result<Self, PadnetError> {
        let template = Self::init(cfg, 0)?;
        if template.params.len() != params.len() {
            return Err(PadnetError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (name, _, t)) in template.params.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != t.shape() {
                return Err(PadnetError::Checkpoint(format!(
                    "parameter {i}: expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
            params.set_group(i, template.params.group(i));
        }
        Ok(Self {
            cfg: cfg.clone(),
            ids: template.ids,
            params,
        })
    }

    pub fn config(&self) -> &PadConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> PadNet<T> {
        PadNet {
            cfg: self.cfg.clone(),
            ids: self.ids.clone(),
            params: self.params.cast(),
        }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(&self.cfg)
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: (0..self.params.len())
                .map(|i| g.leaf_shared(self.params.shared(i), trainable))
                .collect(),
        }
    }

    fn check_item(&self, it: &DenoiseItem<'_, S>) -> Result<(), PadnetError> {
        let cfg = &self.cfg;
        if it.t == 0 || it.t > cfg.diffusion_steps {
            return Err(PadnetError::Timestep {
                t: it.t,
                max: cfg.diffusion_steps,
            });
        }
        it.bundle.validate(cfg)?;
        let b = it.bundle;
        let pairs = [
            (Some(&b.image_target), &it.noised.image, "image"),
            (b.pose_target.as_ref(), &it.noised.action, "action"),
            (b.depth_target.as_ref(), &it.noised.depth, "depth"),
        ];
        for (target, noised, what) in pairs {
            match (target, noised) {
                (Some(t), Some(z)) if t.shape() == z.shape() => {}
                (None, None) => {}
                _ => {
                    return Err(PadnetError::Shape(format!(
                        "{what}: noised latent does not match target presence/shape"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Encoded pose condition `[B_A, pose_dim] -> [B_A, pose_dim]`.
    pub fn encode_pose(&self, g: &mut Graph<S>, p: &BoundParams, pose: Var) -> Result<Var, PadnetError> {
        let (w1, b1) = p.w(self.ids.pose_enc1);
        let (w2, b2) = p.w(self.ids.pose_enc2);
        let hid = g.linear(pose, w1, b1)?;
        let hid = g.silu(hid)?;
        Ok(g.linear(hid, w2, b2)?)
    }

    /// Places per-row embeddings `[B_x, ...]` at `rows` of a `[B, ...]`
    /// tensor whose other rows are zero.
    fn scatter_rows(
        g: &mut Graph<S>,
        x: Option<Var>,
        rows: &[usize],
        batch: usize,
        row_shape: &[usize],
    ) -> Result<Var, PadnetError> {
        let mut zero_shape = vec![1];
        zero_shape.extend_from_slice(row_shape);
        let Some(x) = x else {
            let mut shape = vec![batch];
            shape.extend_from_slice(row_shape);
            return Ok(g.constant(Tensor::zeros(&shape)));
        };
        let z = g.constant(Tensor::zeros(&zero_shape));
        let padded = g.concat(&[x, z], 0)?;
        let mut idx = vec![rows.len(); batch];
        for (j, &r) in rows.iter().enumerate() {
            idx[r] = j;
        }
        Ok(g.gather_rows(padded, &idx)?)
    }

    /// Token embeddings `[B, n, h]` before positional embedding, plus the
    /// key mask and the present rows of the optional modalities.
    fn tokenize(
        &self,
        g: &mut Graph<S>,
        p: &BoundParams,
        items: &[DenoiseItem<'_, S>],
    ) -> Result<(Var, Vec<bool>, Vec<usize>, Vec<usize>), PadnetError> {
        let cfg = &self.cfg;
        let bsz = items.len();
        if bsz == 0 {
            return Err(PadnetError::Shape("empty batch".into()));
        }
        for it in items {
            self.check_item(it)?;
        }
        let counts = cfg.count_tokens();
        let layout = self.layout();
        let h = cfg.hidden;

        let mut img = Vec::with_capacity(bsz * counts.image * cfg.image_token_in());
        for it in items {
            let z = it.noised.image.as_ref().expect("checked");
            let l = concat_condition(&it.bundle.image_cond, z)?;
            img.extend_from_slice(patchify(&l, cfg.patch_i)?.data());
        }
        let img = g.constant(Tensor::new(&[bsz, counts.image, cfg.image_token_in()], img)?);
        let (w, b) = p.w(self.ids.img_tok);
        let img = g.linear(img, w, b)?;

        let action_rows: Vec<usize> = (0..bsz).filter(|&i| items[i].noised.action.is_some()).collect();
        let act = if action_rows.is_empty() {
            None
        } else {
            let pd = cfg.pose_dim;
            let mut pc = Vec::with_capacity(action_rows.len() * pd);
            let mut zt = Vec::with_capacity(action_rows.len() * cfg.k * pd);
            for &i in &action_rows {
                pc.extend_from_slice(items[i].bundle.pose_cond.as_ref().expect("checked").data());
                zt.extend_from_slice(items[i].noised.action.as_ref().expect("checked").data());
            }
            let pc = g.constant(Tensor::new(&[action_rows.len(), pd], pc)?);
            let zt = g.constant(Tensor::new(&[action_rows.len(), cfg.k * pd], zt)?);
            let enc = self.encode_pose(g, p, pc)?;
            let l = g.concat(&[enc, zt], 1)?;
            let (w, b) = p.w(self.ids.act_tok);
            Some(g.linear(l, w, b)?)
        };
        let act = Self::scatter_rows(g, act, &action_rows, bsz, &[h])?;
        let act = g.reshape(act, &[bsz, 1, h])?;

        let mut parts = vec![img, act];
        let mut depth_rows = Vec::new();
        if cfg.depth_enabled {
            depth_rows = (0..bsz).filter(|&i| items[i].noised.depth.is_some()).collect();
            let dep = if depth_rows.is_empty() {
                None
            } else {
                let mut d = Vec::with_capacity(depth_rows.len() * counts.depth * cfg.depth_token_in());
                for &i in &depth_rows {
                    let cond = items[i].bundle.depth_cond.as_ref().expect("checked");
                    let z = items[i].noised.depth.as_ref().expect("checked");
                    let l = concat_condition(cond, z)?;
                    d.extend_from_slice(patchify(&l, cfg.patch_e)?.data());
                }
                let d = g.constant(Tensor::new(&[depth_rows.len(), counts.depth, cfg.depth_token_in()], d)?);
                let (w, b) = p.w(self.ids.depth_tok.expect("depth enabled"));
                Some(g.linear(d, w, b)?)
            };
            parts.push(Self::scatter_rows(g, dep, &depth_rows, bsz, &[counts.depth, h])?);
        }
        let tokens = g.concat(&parts, 1)?;

        let mut mask = Vec::with_capacity(bsz * layout.total);
        for it in items {
            mask.extend(layout.key_mask(&it.bundle.presence()));
        }
        Ok((tokens, mask, action_rows, depth_rows))
    }

    /// Token sequence of a single item, as fed to the trunk before
    /// positional embedding.
    pub fn token_seq(&self, item: &DenoiseItem<'_, S>) -> Result<TokenSeq<S>, PadnetError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (tokens, mask, _, _) = self.tokenize(&mut g, &p, std::slice::from_ref(item))?;
        let n = self.layout().total;
        let t = g.value(tokens).clone().reshape(&[n, self.cfg.hidden])?;
        Ok(TokenSeq {
            tokens: t,
            attn_mask: mask,
            layout: self.layout(),
        })
    }

    /// `SiLU(timestep embedding + instruction embedding)`, `[B, h]`.
    fn condition(&self, g: &mut Graph<S>, p: &BoundParams, items: &[DenoiseItem<'_, S>]) -> Result<Var, PadnetError> {
        let cfg = &self.cfg;
        let mut te = Vec::with_capacity(items.len() * cfg.time_dim);
        for it in items {
            te.extend(timestep_embedding(it.t, cfg.time_dim).into_iter().map(S::lit));
        }
        let te = g.constant(Tensor::new(&[items.len(), cfg.time_dim], te)?);
        let (w1, b1) = p.w(self.ids.t_fc1);
        let (w2, b2) = p.w(self.ids.t_fc2);
        let x = g.linear(te, w1, b1)?;
        let x = g.silu(x)?;
        let temb = g.linear(x, w2, b2)?;
        let ids: Vec<usize> = items.iter().map(|it| it.bundle.instruction).collect();
        let lemb = g.gather_rows(p.vars[self.ids.instr_emb], &ids)?;
        let c = g.add(temb, lemb)?;
        Ok(g.silu(c)?)
    }

    /// Embedded tokens with positions, key mask and conditioning vector.
    /// Returns `(x [B, n, h], key_mask, cond [B, h], action_rows, depth_rows)`.
    #[allow(clippy::type_complexity)]
    pub fn embed(
        &self,
        g: &mut Graph<S>,
        p: &BoundParams,
        items: &[DenoiseItem<'_, S>],
    ) -> Result<(Var, Vec<bool>, Var, Vec<usize>, Vec<usize>), PadnetError> {
        let (tokens, mask, ar, dr) = self.tokenize(g, p, items)?;
        let bsz = items.len();
        let n = self.layout().total;
        let h = self.cfg.hidden;
        let pos = g.reshape(p.vars[self.ids.pos_emb], &[1, n * h])?;
        let pos = g.expand_mid(pos, bsz)?;
        let pos = g.reshape(pos, &[bsz, n, h])?;
        let x = g.add(tokens, pos)?;
        let c = self.condition(g, p, items)?;
        Ok((x, mask, c, ar, dr))
    }

    fn modulate(g: &mut Graph<S>, x: Var, shift: Var, scale: Var) -> Result<Var, PadnetError> {
        let xn = g.layer_norm(x, LN_EPS)?;
        let s1 = g.add_scalar(scale, 1.0)?;
        let y = g.mul(xn, s1)?;
        Ok(g.add(y, shift)?)
    }

    fn attention(&self, g: &mut Graph<S>, p: &BoundParams, blk: &BlockIds, x: Var, mask: &[bool]) -> Result<Var, PadnetError> {
        let s = g.shape(x).to_vec();
        let (bsz, n, h) = (s[0], s[1], s[2]);
        let heads = self.cfg.n_heads;
        let dh = h / heads;
        let (w, b) = p.w(blk.qkv);
        let qkv = g.linear(x, w, b)?;
        let qkv = g.reshape(qkv, &[bsz, n, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut qkv_parts = [qkv; 3];
        for (j, part) in qkv_parts.iter_mut().enumerate() {
            let t = g.narrow(qkv, 0, j, 1)?;
            *part = g.reshape(t, &[bsz, heads, n, dh])?;
        }
        let [q, k, v] = qkv_parts;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.masked_softmax(scores, mask)?;
        let o = g.bmm(attn, v, false)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bsz, n, h])?;
        let (w, b) = p.w(blk.proj);
        Ok(g.linear(o, w, b)?)
    }

    /// Transformer blocks and final modulation over `x [B, n, h]`.
    pub fn trunk(&self, g: &mut Graph<S>, p: &BoundParams, x: Var, mask: &[bool], cond: Var) -> Result<Var, PadnetError> {
        let n = g.shape(x)[1];
        let h = self.cfg.hidden;
        let mut x = x;
        for blk in &self.ids.blocks {
            let (w, b) = p.w(blk.ada);
            let m = g.linear(cond, w, b)?;
            let m = g.expand_mid(m, n)?;
            let mut chunk = [m; 6];
            for (j, c) in chunk.iter_mut().enumerate() {
                *c = g.narrow(m, 2, j * h, h)?;
            }
            let [sh1, sc1, gate1, sh2, sc2, gate2] = chunk;

            let hx = Self::modulate(g, x, sh1, sc1)?;
            let a = self.attention(g, p, blk, hx, mask)?;
            let a = g.mul(gate1, a)?;
            x = g.add(x, a)?;

            let hx = Self::modulate(g, x, sh2, sc2)?;
            let (w1, b1) = p.w(blk.fc1);
            let (w2, b2) = p.w(blk.fc2);
            let f = g.linear(hx, w1, b1)?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w2, b2)?;
            let f = g.mul(gate2, f)?;
            x = g.add(x, f)?;
        }
        let (w, b) = p.w(self.ids.final_ada);
        let m = g.linear(cond, w, b)?;
        let m = g.expand_mid(m, n)?;
        let shift = g.narrow(m, 2, 0, h)?;
        let scale = g.narrow(m, 2, h, h)?;
        Self::modulate(g, x, shift, scale)
    }

    fn heads(&self, g: &mut Graph<S>, p: &BoundParams, x: Var, ar: Vec<usize>, dr: Vec<usize>) -> Result<ForwardOut, PadnetError> {
        let layout = self.layout();
        let bsz = g.shape(x)[0];
        let h = self.cfg.hidden;
        let xi = g.narrow(x, 1, 0, layout.image.len())?;
        let (w, b) = p.w(self.ids.head_img);
        let image = g.linear(xi, w, b)?;
        let action = if ar.is_empty() {
            None
        } else {
            let xa = g.narrow(x, 1, layout.action.start, 1)?;
            let xa = g.reshape(xa, &[bsz, h])?;
            let xa = g.gather_rows(xa, &ar)?;
            let (w, b) = p.w(self.ids.head_act);
            Some(g.linear(xa, w, b)?)
        };
        let depth = match (self.ids.head_depth, dr.is_empty()) {
            (Some(hd), false) => {
                let xd = g.narrow(x, 1, layout.depth.start, layout.depth.len())?;
                let xd = g.gather_rows(xd, &dr)?;
                let (w, b) = p.w(hd);
                Some(g.linear(xd, w, b)?)
            }
            _ => None,
        };
        Ok(ForwardOut {
            image,
            action,
            depth,
            action_rows: ar,
            depth_rows: dr,
        })
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, g: &mut Graph<S>, p: &BoundParams, items: &[DenoiseItem<'_, S>]) -> Result<ForwardOut, PadnetError> {
        let (x, mask, c, ar, dr) = self.embed(g, p, items)?;
        let y = self.trunk(g, p, x, &mask, c)?;
        self.heads(g, p, y, ar, dr)
    }

    /// Noise predictions in latent layout, one per item, without gradients.
    pub fn predict(&self, items: &[DenoiseItem<'_, S>]) -> Result<Vec<NoisePrediction<S>>, PadnetError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, items)?;
        let cfg = &self.cfg;
        let layout = self.layout();
        let img = g.value(out.image).data();
        let img_len = layout.image.len() * cfg.image_token_out();
        let act_len = cfg.k * cfg.pose_dim;
        let dep_len = layout.depth.len() * cfg.depth_token_out();
        let mut res = Vec::with_capacity(items.len());
        for i in 0..items.len() {
            let it = Tensor::new(&[layout.image.len(), cfg.image_token_out()], img[i * img_len..(i + 1) * img_len].to_vec())?;
            let act = match (out.action, out.action_rows.iter().position(|&r| r == i)) {
                (Some(a), Some(j)) => Some(Tensor::new(&[act_len], g.value(a).data()[j * act_len..(j + 1) * act_len].to_vec())?),
                _ => None,
            };
            let dep = match (out.depth, out.depth_rows.iter().position(|&r| r == i)) {
                (Some(d), Some(j)) => Some(Tensor::new(
                    &[layout.depth.len(), cfg.depth_token_out()],
                    g.value(d).data()[j * dep_len..(j + 1) * dep_len].to_vec(),
                )?),
                _ => None,
            };
            res.push(detokenize(&it, act.as_ref(), dep.as_ref(), cfg)?);
        }
        Ok(res)
    }

    /// Largest difference between trunk outputs at present positions when
    /// run over the padded, masked sequence versus a compact sequence of
    /// only the present tokens.
    pub fn mask_gap(&self, item: &DenoiseItem<'_, S>) -> Result<f64, PadnetError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (x, mask, c, _, _) = self.embed(&mut g, &p, std::slice::from_ref(item))?;
        let padded = self.trunk(&mut g, &p, x, &mask, c)?;
        let n = mask.len();
        let h = self.cfg.hidden;
        let present: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let flat = g.reshape(x, &[n, h])?;
        let xc = g.gather_rows(flat, &present)?;
        let xc = g.reshape(xc, &[1, present.len(), h])?;
        let compact = self.trunk(&mut g, &p, xc, &vec![true; present.len()], c)?;
        let (a, b) = (g.value(padded).data(), g.value(compact).data());
        let mut worst = 0.0f64;
        for (j, &i) in present.iter().enumerate() {
            for d in 0..h {
                worst = worst.max((a[i * h + d].as_f64() - b[j * h + d].as_f64()).abs());
            }
        }
        Ok(worst)
    }

    /// Weighted noise-prediction loss of a batch. `eps[i]` holds the true
    /// noise of item `i` in latent layout for each present modality.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        p: &BoundParams,
        items: &[DenoiseItem<'_, S>],
        eps: &[PerModality<Option<Tensor<S>>>],
        w: &LossWeights,
    ) -> Result<BatchLoss, PadnetError> {
        if eps.len() != items.len() {
            return Err(PadnetError::Shape(format!("{} noise sets for {} items", eps.len(), items.len())));
        }
        let cfg = &self.cfg;
        let out = self.forward(g, p, items)?;
        let missing = |m: &str| PadnetError::Shape(format!("missing {m} noise"));

        // a zero image weight drops the image term entirely
        let li = if w.lambda_i > 0.0 {
            let mut img = Vec::new();
            for e in eps {
                let e = e.image.as_ref().ok_or_else(|| missing("image"))?;
                img.extend_from_slice(patchify(e, cfg.patch_i)?.data());
            }
            let img = g.constant(Tensor::new(g.shape(out.image), img)?);
            Some(ddpm_loss(g, out.image, img)?)
        } else {
            None
        };

        let la = match out.action {
            Some(a) => {
                let mut v = Vec::new();
                for &r in &out.action_rows {
                    v.extend_from_slice(eps[r].action.as_ref().ok_or_else(|| missing("action"))?.data());
                }
                let t = g.constant(Tensor::new(g.shape(a), v)?);
                Some(ddpm_loss(g, a, t)?)
            }
            None => None,
        };
        let le = match out.depth {
            Some(d) => {
                let mut v = Vec::new();
                for &r in &out.depth_rows {
                    let e = eps[r].depth.as_ref().ok_or_else(|| missing("depth"))?;
                    v.extend_from_slice(patchify(e, cfg.patch_e)?.data());
                }
                let t = g.constant(Tensor::new(g.shape(d), v)?);
                Some(ddpm_loss(g, d, t)?)
            }
            None => None,
        };
        let per = PerModality {
            image: li,
            action: la,
            depth: le,
        };
        let total = combined_loss(g, &per, w)?;
        let per_modality = PerModality {
            image: per.image.map(|v| g.value(v).item().as_f64()),
            action: per.action.map(|v| g.value(v).item().as_f64()),
            depth: per.depth.map(|v| g.value(v).item().as_f64()),
        };
        Ok(BatchLoss { total, per_modality })
    }
}
