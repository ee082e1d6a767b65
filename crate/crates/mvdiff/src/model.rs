//! The denoiser: patchify into a latent token grid, N blocks of
//! AdaLN-modulated joint attention (latent and text streams) followed by
//! cross-view and temporal attention behind learnable gates, then
//! unpatchify to a velocity field. Frame and view positional encodings
//! live inside their sub-blocks only, which makes the network exactly
//! frame-permutation-equivariant when the temporal sub-block is dropped.

use crate::conditioning::{AdapterVars, TokenVars, ADAPTER_LEVELS, ADAPTER_WIDTH, SEQ_LEN};
use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{RayMlpVars, RAY_FREQS};
use crate::rng::rng_stream;
use crate::tape::{Tape, Var, MASK_OFF};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Divisor bringing unified-frame ray origins into the encoder's range.
pub const ORIGIN_SCALE: f64 = 50.0;

/// Ray MLP hidden width.
pub const RAY_HIDDEN: usize = 16;

/// Gate scalars start at 2.0: sigma(2) = 0.8808 of the blend stays on the
/// residual stream at init.
pub const GATE_INIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            views: 6,
            height: 48,
            width: 80,
            patch: 8,
            channels: 64,
            blocks: 4,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Dim(format!(
                "{}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.channels % self.heads != 0 || self.channels % 2 != 0 {
            return Err(Error::Dim(format!(
                "channels {} must be even and divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.frames == 0 || self.views == 0 || self.blocks == 0 {
            return Err(Error::Dim("frames, views, blocks must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn slots(&self) -> usize {
        self.frames * self.views
    }
}

// ---- parameter registry ----------------------------------------------

/// Named parameter tensors with a stable iteration order; the name prefix
/// (patch., ray., token., adapter., block{i}.) is what the stage schedule
/// filters on.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        debug_assert!(self.entries.iter().all(|(n, _)| n != name), "duplicate {}", name);
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("missing {}", name)).1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing {}", name));
        &mut entry.1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn check_shapes(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Validation(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.entries.iter().zip(&other.entries) {
            if an != bn || at.shape() != bt.shape() {
                return Err(Error::Validation(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    an,
                    at.shape(),
                    bn,
                    bt.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Canonical per-block parameter names, in BlockVars field order.
pub fn block_param_names(i: usize) -> Vec<String> {
    let b = format!("block{}", i);
    [
        "backbone.mod_lat.w",
        "backbone.mod_lat.b",
        "backbone.mod_txt.w",
        "backbone.mod_txt.b",
        "backbone.qkv_lat.w",
        "backbone.qkv_lat.b",
        "backbone.proj_lat.w",
        "backbone.proj_lat.b",
        "backbone.qkv_txt.w",
        "backbone.qkv_txt.b",
        "backbone.proj_txt.w",
        "backbone.proj_txt.b",
        "backbone.mlp_lat.w1",
        "backbone.mlp_lat.b1",
        "backbone.mlp_lat.w2",
        "backbone.mlp_lat.b2",
        "backbone.mlp_txt.w1",
        "backbone.mlp_txt.b1",
        "backbone.mlp_txt.w2",
        "backbone.mlp_txt.b2",
        "temporal.qkv.w",
        "temporal.qkv.b",
        "temporal.proj.w",
        "temporal.proj.b",
        "crossview.qkv.w",
        "crossview.qkv.b",
        "crossview.proj.w",
        "crossview.proj.b",
        "gate.temporal",
        "gate.crossview",
    ]
    .iter()
    .map(|s| format!("{}.{}", b, s))
    .collect()
}

/// Initialize all model parameters. AdaLN modulations and output
/// projections of the new sub-blocks start at zero (identity blocks); the
/// unembed is random so the frozen-backbone stages still see gradients.
pub fn init_params(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> ParamSet {
    let mut rng = rng_stream(seed, "params");
    let c = cfg.channels;
    let p3 = cfg.patch * cfg.patch * 3;
    let mut ps = ParamSet::new();
    ps.push("patch.embed.w", uniform(&mut rng, &[p3, c], (1.0 / p3 as f64).sqrt()));
    ps.push("patch.embed.b", Tensor::zeros(&[c]));
    // random unembed: stages I and II freeze the backbone, so a zero
    // readout would silence every gradient in a from-scratch model
    ps.push("patch.unembed.w", uniform(&mut rng, &[c, p3], (1.0 / c as f64).sqrt()));
    ps.push("patch.unembed.b", Tensor::zeros(&[p3]));

    let rin = RAY_FREQS * 12;
    ps.push("ray.w1", uniform(&mut rng, &[rin, RAY_HIDDEN], (1.0 / rin as f64).sqrt()));
    ps.push("ray.b1", Tensor::zeros(&[RAY_HIDDEN]));
    ps.push("ray.w2", uniform(&mut rng, &[RAY_HIDDEN, c], (1.0 / RAY_HIDDEN as f64).sqrt() * 0.5));
    ps.push("ray.b2", Tensor::zeros(&[c]));

    let mut table = uniform(&mut rng, &[vocab_len, c], (1.0 / c as f64).sqrt());
    for j in 0..c {
        table.data_mut()[j] = 0.0; // reserved null row
    }
    ps.push("token.table", table);
    ps.push("token.pos", uniform(&mut rng, &[SEQ_LEN, c], 0.02));

    let a = ADAPTER_WIDTH;
    for l in 0..ADAPTER_LEVELS {
        let cin = if l == 0 { 6 } else { a };
        let scale = (2.0 / (cin * 9) as f64).sqrt();
        ps.push(&format!("adapter.conv{}.w", l), uniform(&mut rng, &[a, cin, 3, 3], scale));
        ps.push(&format!("adapter.conv{}.b", l), Tensor::zeros(&[a]));
    }
    for l in 0..ADAPTER_LEVELS {
        // zero-init projections: conditioning fades in during training
        ps.push(&format!("adapter.proj{}.w", l), Tensor::zeros(&[c, a, 1, 1]));
        ps.push(&format!("adapter.proj{}.b", l), Tensor::zeros(&[c]));
    }

    let s = (1.0 / c as f64).sqrt();
    for i in 0..cfg.blocks {
        let names = block_param_names(i);
        let mut idx = 0;
        let mut push = |ps: &mut ParamSet, t: Tensor| {
            ps.push(&names[idx], t);
            idx += 1;
        };
        for _ in 0..2 {
            push(&mut ps, Tensor::zeros(&[c, 6 * c])); // mod w (AdaLN-zero)
            push(&mut ps, Tensor::zeros(&[6 * c])); // mod b
        }
        for _ in 0..2 {
            push(&mut ps, uniform(&mut rng, &[c, 3 * c], s)); // qkv
            push(&mut ps, Tensor::zeros(&[3 * c]));
            push(&mut ps, uniform(&mut rng, &[c, c], s)); // proj
            push(&mut ps, Tensor::zeros(&[c]));
        }
        for _ in 0..2 {
            push(&mut ps, uniform(&mut rng, &[c, 2 * c], s)); // mlp w1
            push(&mut ps, Tensor::zeros(&[2 * c]));
            push(&mut ps, uniform(&mut rng, &[2 * c, c], (1.0 / (2 * c) as f64).sqrt()));
            push(&mut ps, Tensor::zeros(&[c]));
        }
        for _ in 0..2 {
            // temporal then crossview: random qkv, zero out-proj
            push(&mut ps, uniform(&mut rng, &[c, 3 * c], s));
            push(&mut ps, Tensor::zeros(&[3 * c]));
            push(&mut ps, Tensor::zeros(&[c, c]));
            push(&mut ps, Tensor::zeros(&[c]));
        }
        push(&mut ps, Tensor::full(&[1], GATE_INIT));
        push(&mut ps, Tensor::full(&[1], GATE_INIT));
    }
    ps
}

// ---- tape-side views --------------------------------------------------

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub mod_lat: (Var, Var),
    pub mod_txt: (Var, Var),
    pub qkv_lat: (Var, Var),
    pub proj_lat: (Var, Var),
    pub qkv_txt: (Var, Var),
    pub proj_txt: (Var, Var),
    pub mlp_lat: (Var, Var, Var, Var),
    pub mlp_txt: (Var, Var, Var, Var),
    pub qkv_t: (Var, Var),
    pub proj_t: (Var, Var),
    pub qkv_x: (Var, Var),
    pub proj_x: (Var, Var),
    pub gate_t: Var,
    pub gate_x: Var,
}

impl BlockVars {
    pub const FIELDS: usize = 30;

    /// Vars in `block_param_names` order.
    pub fn from_slice(v: &[Var]) -> BlockVars {
        assert_eq!(v.len(), Self::FIELDS);
        BlockVars {
            mod_lat: (v[0], v[1]),
            mod_txt: (v[2], v[3]),
            qkv_lat: (v[4], v[5]),
            proj_lat: (v[6], v[7]),
            qkv_txt: (v[8], v[9]),
            proj_txt: (v[10], v[11]),
            mlp_lat: (v[12], v[13], v[14], v[15]),
            mlp_txt: (v[16], v[17], v[18], v[19]),
            qkv_t: (v[20], v[21]),
            proj_t: (v[22], v[23]),
            qkv_x: (v[24], v[25]),
            proj_x: (v[26], v[27]),
            gate_t: v[28],
            gate_x: v[29],
        }
    }
}

pub struct ModelVars {
    pub patch_embed: (Var, Var),
    pub patch_unembed: (Var, Var),
    pub ray: RayMlpVars,
    pub tokens: TokenVars,
    pub adapter: AdapterVars,
    pub blocks: Vec<BlockVars>,
    /// (name, var) for every parameter, in registry order.
    pub index: Vec<(String, Var)>,
}

impl ModelVars {
    /// Put every parameter on the tape; `trainable` decides per name
    /// whether it is a gradient leaf or a frozen constant.
    pub fn new(
        tape: &mut Tape,
        params: &ParamSet,
        cfg: &ModelConfig,
        trainable: &dyn Fn(&str) -> bool,
    ) -> ModelVars {
        let mut index = Vec::with_capacity(params.len());
        let mut by_name: HashMap<&str, Var> = HashMap::new();
        for (name, t) in params.iter() {
            let v = tape.leaf_if(t.clone(), trainable(name));
            index.push((name.to_string(), v));
            by_name.insert(name, v);
        }
        let g = |n: &str| *by_name.get(n).unwrap_or_else(|| panic!("missing param {}", n));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let names = block_param_names(i);
                let vars: Vec<Var> = names.iter().map(|n| g(n)).collect();
                BlockVars::from_slice(&vars)
            })
            .collect();
        ModelVars {
            patch_embed: (g("patch.embed.w"), g("patch.embed.b")),
            patch_unembed: (g("patch.unembed.w"), g("patch.unembed.b")),
            ray: RayMlpVars { w1: g("ray.w1"), b1: g("ray.b1"), w2: g("ray.w2"), b2: g("ray.b2") },
            tokens: TokenVars { table: g("token.table"), pos: g("token.pos") },
            adapter: AdapterVars {
                convs: (0..ADAPTER_LEVELS)
                    .map(|l| (g(&format!("adapter.conv{}.w", l)), g(&format!("adapter.conv{}.b", l))))
                    .collect(),
                projs: (0..ADAPTER_LEVELS)
                    .map(|l| (g(&format!("adapter.proj{}.w", l)), g(&format!("adapter.proj{}.b", l))))
                    .collect(),
            },
            blocks,
            index,
        }
    }
}

// ---- building blocks --------------------------------------------------

/// Fixed sinusoidal position table, [n, c].
pub fn sinusoidal_table(n: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[n, c], |i| {
        let (pos, j) = (i / c, i % c);
        let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / c as f64);
        let x = pos as f64 * freq;
        if j % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Continuous-timestep embedding per slot, [T*V, c], from t in [0,1].
pub fn time_embed_slots(t_slot: &Tensor, c: usize) -> Tensor {
    let n = t_slot.numel();
    Tensor::from_fn(&[n, c], |i| {
        let (s, j) = (i / c, i % c);
        let freq = 1000f64.powf((j / 2 * 2) as f64 / c as f64);
        let x = t_slot.data()[s] * freq;
        if j % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// x [.., Cin] @ w [Cin, Cout] + b.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let sh = tape.value(x).shape().to_vec();
    let cin = *sh.last().unwrap();
    let n: usize = sh[..sh.len() - 1].iter().product();
    let x2 = tape.reshape(x, &[n, cin])?;
    let y = tape.matmul(x2, w)?;
    let y = tape.add(y, b)?;
    let cout = tape.value(w).shape()[1];
    let mut out = sh;
    *out.last_mut().unwrap() = cout;
    tape.reshape(y, &out)
}

/// Convex blend sigmoid(alpha) * z + (1 - sigmoid(alpha)) * f.
pub fn gated_fuse(tape: &mut Tape, z: Var, f: Var, alpha: Var) -> Result<Var> {
    let s = tape.sigmoid(alpha);
    let zs = tape.mul(z, s)?;
    let ns = tape.neg(s);
    let om = tape.add_scalar(ns, 1.0);
    let fs = tape.mul(f, om)?;
    tape.add(zs, fs)
}

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = tape.add_scalar(scale, 1.0);
    let xs = tape.mul(x, s1)?;
    tape.add(xs, shift)
}

fn chunk6(tape: &mut Tape, m: Var, c: usize) -> Result<[Var; 6]> {
    let b = tape.value(m).shape()[0];
    let mut out = Vec::with_capacity(6);
    for i in 0..6 {
        let n = tape.narrow(m, 1, i * c, c)?;
        out.push(tape.reshape(n, &[b, 1, c])?);
    }
    Ok([out[0], out[1], out[2], out[3], out[4], out[5]])
}

fn split_qkv(tape: &mut Tape, x: Var, c: usize) -> Result<(Var, Var, Var)> {
    let last = tape.value(x).shape().len() - 1;
    Ok((
        tape.narrow(x, last, 0, c)?,
        tape.narrow(x, last, c, c)?,
        tape.narrow(x, last, 2 * c, c)?,
    ))
}

/// One stream's half of the joint-attention sub-block up to q,k,v.
fn stream_qkv(
    tape: &mut Tape,
    x: Var,
    shift: Var,
    scale: Var,
    qkv: (Var, Var),
    c: usize,
) -> Result<(Var, Var, Var)> {
    let n = tape.layernorm_last(x, 1e-6);
    let m = modulate(tape, n, shift, scale)?;
    let h = linear(tape, m, qkv.0, qkv.1)?;
    split_qkv(tape, h, c)
}

/// Joint attention over [latent tokens, text tokens] within each (t,v)
/// slot, AdaLN-modulated, then gated MLPs; returns updated (latent, text).
#[allow(clippy::too_many_arguments)]
pub fn backbone_block(
    tape: &mut Tape,
    x: Var, // [B, hw, C]
    y: Var, // [B, L, C]
    cvec: Var, // [B, C]
    bv: &BlockVars,
    c: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let hw = tape.value(x).shape()[1];
    let l = tape.value(y).shape()[1];
    let cg = tape.gelu(cvec);
    let m_lat = linear(tape, cg, bv.mod_lat.0, bv.mod_lat.1)?;
    let m_txt = linear(tape, cg, bv.mod_txt.0, bv.mod_txt.1)?;
    let [sh1l, sc1l, g1l, sh2l, sc2l, g2l] = chunk6(tape, m_lat, c)?;
    let [sh1t, sc1t, g1t, sh2t, sc2t, g2t] = chunk6(tape, m_txt, c)?;

    let (qx, kx, vx) = stream_qkv(tape, x, sh1l, sc1l, bv.qkv_lat, c)?;
    let (qy, ky, vy) = stream_qkv(tape, y, sh1t, sc1t, bv.qkv_txt, c)?;
    let q = tape.concat(1, qx, qy)?;
    let k = tape.concat(1, kx, ky)?;
    let v = tape.concat(1, vx, vy)?;
    let a = tape.attention(q, k, v, None, heads)?;
    let ax = tape.narrow(a, 1, 0, hw)?;
    let ay = tape.narrow(a, 1, hw, l)?;
    let dx = linear(tape, ax, bv.proj_lat.0, bv.proj_lat.1)?;
    let dx = tape.mul(dx, g1l)?;
    let x = tape.add(x, dx)?;
    let dy = linear(tape, ay, bv.proj_txt.0, bv.proj_txt.1)?;
    let dy = tape.mul(dy, g1t)?;
    let y = tape.add(y, dy)?;

    let mlp = |tape: &mut Tape, z: Var, sh: Var, sc: Var, g: Var, w: (Var, Var, Var, Var)| -> Result<Var> {
        let n = tape.layernorm_last(z, 1e-6);
        let m = modulate(tape, n, sh, sc)?;
        let h = linear(tape, m, w.0, w.1)?;
        let h = tape.gelu(h);
        let o = linear(tape, h, w.2, w.3)?;
        let o = tape.mul(o, g)?;
        tape.add(z, o)
    };
    let x = mlp(tape, x, sh2l, sc2l, g2l, bv.mlp_lat)?;
    let y = mlp(tape, y, sh2t, sc2t, g2t, bv.mlp_txt)?;
    Ok((x, y))
}

/// Self-attention with the frame axis as sequence (batch V*h*w), fused
/// back through the temporal gate. Frame positions enter here only.
pub fn temporal_block(
    tape: &mut Tape,
    x: Var, // [B = T*V, hw, C]
    bv: &BlockVars,
    t_n: usize,
    v_n: usize,
    c: usize,
    heads: usize,
    frame_pos: &Tensor,
) -> Result<Var> {
    let hw = tape.value(x).shape()[1];
    let x4 = tape.reshape(x, &[t_n, v_n, hw, c])?;
    let xp = tape.permute(x4, &[1, 2, 0, 3])?; // [V, hw, T, C]
    let xs = tape.reshape(xp, &[v_n * hw, t_n, c])?;
    let pos = tape.constant(frame_pos.clone());
    let xq = tape.add(xs, pos)?;
    let n = tape.layernorm_last(xq, 1e-6);
    let h = linear(tape, n, bv.qkv_t.0, bv.qkv_t.1)?;
    let (q, k, v) = split_qkv(tape, h, c)?;
    let a = tape.attention(q, k, v, None, heads)?;
    let d = linear(tape, a, bv.proj_t.0, bv.proj_t.1)?;
    let d4 = tape.reshape(d, &[v_n, hw, t_n, c])?;
    let db = tape.permute(d4, &[2, 0, 1, 3])?; // [T, V, hw, C]
    let delta = tape.reshape(db, &[t_n * v_n, hw, c])?;
    let f = tape.add(x, delta)?;
    gated_fuse(tape, x, f, bv.gate_t)
}

/// Self-attention with the view axis as sequence (batch T*h*w); masked
/// views are excluded from keys and pass through unchanged. View positions
/// enter here only.
#[allow(clippy::too_many_arguments)]
pub fn crossview_block(
    tape: &mut Tape,
    x: Var, // [B = T*V, hw, C]
    bv: &BlockVars,
    t_n: usize,
    v_n: usize,
    c: usize,
    heads: usize,
    view_pos: &Tensor,
    view_mask: &[bool],
) -> Result<Var> {
    if view_mask.len() != v_n {
        return Err(Error::Dim(format!("view mask length {} vs {} views", view_mask.len(), v_n)));
    }
    if view_mask.iter().all(|m| !m) {
        return Err(Error::Validation("all views masked".into()));
    }
    let hw = tape.value(x).shape()[1];
    let x4 = tape.reshape(x, &[t_n, v_n, hw, c])?;
    let xp = tape.permute(x4, &[0, 2, 1, 3])?; // [T, hw, V, C]
    let xs = tape.reshape(xp, &[t_n * hw, v_n, c])?;
    let pos = tape.constant(view_pos.clone());
    let xq = tape.add(xs, pos)?;
    let n = tape.layernorm_last(xq, 1e-6);
    let h = linear(tape, n, bv.qkv_x.0, bv.qkv_x.1)?;
    let (q, k, v) = split_qkv(tape, h, c)?;
    let attn_mask = Tensor::from_fn(&[v_n, v_n], |i| {
        if view_mask[i % v_n] {
            0.0
        } else {
            MASK_OFF
        }
    });
    let a = tape.attention(q, k, v, Some(&attn_mask), heads)?;
    let d = linear(tape, a, bv.proj_x.0, bv.proj_x.1)?;
    // zero the update at masked views so they pass through exactly
    let mvec = Tensor::from_fn(&[v_n, 1], |i| if view_mask[i] { 1.0 } else { 0.0 });
    let mvec = tape.constant(mvec);
    let d = tape.mul(d, mvec)?;
    let d4 = tape.reshape(d, &[t_n, hw, v_n, c])?;
    let db = tape.permute(d4, &[0, 2, 1, 3])?;
    let delta = tape.reshape(db, &[t_n * v_n, hw, c])?;
    let f = tape.add(x, delta)?;
    gated_fuse(tape, x, f, bv.gate_x)
}

/// Linear patch embedding, [T,V,H,W,3] -> [T*V, h*w, C].
pub fn patchify(tape: &mut Tape, video: Var, cfg: &ModelConfig, embed: (Var, Var)) -> Result<Var> {
    let sh = tape.value(video).shape().to_vec();
    let (t_n, v_n) = (sh[0], sh[1]);
    let (hh, ww) = (sh[2], sh[3]);
    let p = cfg.patch;
    if hh % p != 0 || ww % p != 0 {
        return Err(Error::Dim(format!("{}x{} not divisible by patch {}", hh, ww, p)));
    }
    let (gh, gw) = (hh / p, ww / p);
    let x = tape.reshape(video, &[t_n * v_n, gh, p, gw, p, 3])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = tape.reshape(x, &[t_n * v_n * gh * gw, p * p * 3])?;
    let y = tape.matmul(x, embed.0)?;
    let y = tape.add(y, embed.1)?;
    let c = tape.value(embed.0).shape()[1];
    tape.reshape(y, &[t_n * v_n, gh * gw, c])
}

/// Inverse patch arrangement with a linear unembedding, -> [T,V,H,W,3].
pub fn unpatchify(
    tape: &mut Tape,
    tokens: Var,
    cfg: &ModelConfig,
    t_n: usize,
    v_n: usize,
    unembed: (Var, Var),
) -> Result<Var> {
    let (gh, gw) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    let p = cfg.patch;
    let y = linear(tape, tokens, unembed.0, unembed.1)?;
    let y = tape.reshape(y, &[t_n * v_n, gh, gw, p, p, 3])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[t_n, v_n, gh * p, gw * p, 3])
}

/// Tape-side condition features; None means the family's null condition.
pub struct CondVars {
    /// Per level [T*V, h, w, C].
    pub adapter: Option<Vec<Var>>,
    /// [T*V, h, w, C].
    pub ray: Option<Var>,
    /// Embedded text tokens, [T*V, L, C].
    pub text: Option<Var>,
}

impl CondVars {
    pub fn null() -> Self {
        CondVars { adapter: None, ray: None, text: None }
    }
}

/// Full denoiser pass: velocity prediction with the same shape as `z_t`.
#[allow(clippy::too_many_arguments)]
pub fn unimlvg_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    z_t: Var,         // [T, V, H, W, 3]
    t_slot: &Tensor,  // [T, V], zero at reference slots
    conds: &CondVars,
    view_mask: &[bool],
    drop_temporal: bool,
    bypass_crossview: bool,
) -> Result<Var> {
    let sh = tape.value(z_t).shape().to_vec();
    if sh.len() != 5 || sh[4] != 3 {
        return Err(Error::Dim(format!("expected [T,V,H,W,3], got {:?}", sh)));
    }
    let (t_n, v_n) = (sh[0], sh[1]);
    if t_slot.shape() != [t_n, v_n] {
        return Err(Error::Dim(format!("t_slot {:?} vs video {:?}", t_slot.shape(), sh)));
    }
    let c = cfg.channels;
    let b = t_n * v_n;
    let (gh, gw) = (sh[2] / cfg.patch, sh[3] / cfg.patch);
    let hw = gh * gw;

    let mut x = patchify(tape, z_t, cfg, vars.patch_embed)?;
    if let Some(ray) = conds.ray {
        let r = tape.reshape(ray, &[b, hw, c])?;
        x = tape.add(x, r)?;
    }

    // text stream: embedded tokens or the null (zero) sequence
    let mut y = match conds.text {
        Some(t) => t,
        None => tape.constant(Tensor::zeros(&[b, SEQ_LEN, c])),
    };
    // AdaLN vector: timestep embedding plus pooled text
    let temb = tape.constant(time_embed_slots(t_slot, c));
    let pool_w = tape.constant(Tensor::full(&[b, 1, SEQ_LEN], 1.0 / SEQ_LEN as f64));
    let pooled = tape.bmm(pool_w, y)?;
    let pooled = tape.reshape(pooled, &[b, c])?;
    let cvec = tape.add(temb, pooled)?;

    let frame_pos = sinusoidal_table(t_n, c);
    let view_pos = sinusoidal_table(v_n, c);

    for (i, bv) in vars.blocks.iter().enumerate() {
        let (nx, ny) = backbone_block(tape, x, y, cvec, bv, c, cfg.heads)?;
        x = nx;
        y = ny;
        if let Some(levels) = &conds.adapter {
            if i < levels.len() {
                let lv = tape.reshape(levels[i], &[b, hw, c])?;
                x = tape.add(x, lv)?;
            }
        }
        if !bypass_crossview {
            x = crossview_block(tape, x, bv, t_n, v_n, c, cfg.heads, &view_pos, view_mask)?;
        }
        if !drop_temporal {
            x = temporal_block(tape, x, bv, t_n, v_n, c, cfg.heads, &frame_pos)?;
        }
    }
    unpatchify(tape, x, cfg, t_n, v_n, vars.patch_unembed)
}

// ---- checkpoints -------------------------------------------------------

/// Save parameters plus a `meta` array holding the config hash bytes.
pub fn save_checkpoint(path: &Path, params: &ParamSet, config_hash: u64) -> Result<()> {
    let mut arrays = Vec::with_capacity(params.len() + 1);
    let hash_bytes = config_hash.to_le_bytes();
    arrays.push((
        "meta".to_string(),
        Tensor::from_fn(&[8], |i| hash_bytes[i] as f64),
    ));
    for (name, t) in params.iter() {
        arrays.push((name.to_string(), t.clone()));
    }
    container::write_file(path, &arrays)
}

/// Load a checkpoint, verifying names and shapes against `template`.
pub fn load_checkpoint(path: &Path, template: &ParamSet) -> Result<(ParamSet, u64)> {
    let arrays = container::read_file(path)?;
    let meta = container::find(&arrays, "meta")?;
    if meta.numel() != 8 {
        return Err(Error::Validation("checkpoint meta must hold 8 hash bytes".into()));
    }
    let mut hb = [0u8; 8];
    for (i, h) in hb.iter_mut().enumerate() {
        *h = meta.data()[i] as u8;
    }
    let mut ps = ParamSet::new();
    for (name, t) in template.iter() {
        let loaded = container::find(&arrays, name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::Validation(format!(
                "checkpoint shape {:?} for {} but model wants {:?}",
                loaded.shape(),
                name,
                t.shape()
            )));
        }
        ps.push(name, loaded.clone());
    }
    Ok((ps, u64::from_le_bytes(hb)))
}
