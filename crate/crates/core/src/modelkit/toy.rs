//! A desk-scale multimodal decoder: pre-norm transformer over a glyph-grid
//! image prefix, instruction tokens and response tokens.
//!
//! Every input row is the sum of a content embedding, a positional embedding
//! and a segment embedding (image, instruction, response, response after a
//! separator). Image cells use learned row and column tables; instruction
//! tokens count positions from 0; the response starts at `<bos>` with
//! position 0 and every separator token (`<Translation>`, `<Answer>`)
//! restarts the count at 0 and switches to the after-separator segment.
//!
//! Forward and backward passes are written out by hand in `f64`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ImageRef;
use crate::error::{Error, Result};
use crate::glyph::{GlyphGrid, SOURCE_GLYPHS};
use crate::modelkit::adapter::{Adapter, AdapterConfig, LoraLayer};
use crate::modelkit::decode::{DecodeSession, ModelInterface};
use crate::modelkit::tokenizer::{TokenId, Tokenizer};
use crate::pipeline::example::TrainingExample;

const LN_EPS: f64 = 1e-5;
const SEG_IMAGE: usize = 0;
const SEG_INSTRUCTION: usize = 1;
const SEG_RESPONSE: usize = 2;
const SEG_AFTER_SEPARATOR: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    /// Glyphs the image embedder knows; any other non-blank cell is rejected.
    pub glyphs: String,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            max_positions: 64,
            max_rows: 8,
            max_cols: 8,
            glyphs: SOURCE_GLYPHS.into(),
            init_seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.max_positions == 0 || self.max_rows == 0 || self.max_cols == 0 {
            return Err(Error::Config("position tables must be non-empty".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors, all rank 2 (biases and gains are `[1, n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Array2<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpec {
    pub name: String,
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    ln1: (usize, usize),
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2: (usize, usize),
    up: usize,
    down: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    glyph: usize,
    row: usize,
    col: usize,
    pos: usize,
    seg: usize,
    layers: Vec<LayerIdx>,
    lnf: (usize, usize),
    head: usize,
}

/// One input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Cell { glyph: usize, row: usize, col: usize },
    Token { id: TokenId, pos: usize, seg: usize },
}

/// Gradients for base parameters and/or adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub base: Option<Vec<Array2<f64>>>,
    pub lora: Option<Vec<(Array2<f64>, Array2<f64>)>>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        if let (Some(a), Some(b)) = (self.base.as_mut(), other.base.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (self.lora.as_mut(), other.lora.as_ref()) {
            for ((xa, xb), (ya, yb)) in a.iter_mut().zip(b) {
                *xa += ya;
                *xb += yb;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        if let Some(b) = self.base.as_mut() {
            out.extend(b.iter_mut());
        }
        if let Some(l) = self.lora.as_mut() {
            for (a, b) in l.iter_mut() {
                out.push(a);
                out.push(b);
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        if let Some(b) = self.base.as_ref() {
            out.extend(b.iter());
        }
        if let Some(l) = self.lora.as_ref() {
            for (a, b) in l {
                out.push(a);
                out.push(b);
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    xa_q: Option<Array2<f64>>,
    xa_k: Option<Array2<f64>>,
    xa_v: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    xa_o: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    xa_up: Option<Array2<f64>>,
    xa_down: Option<Array2<f64>>,
}

/// Activations kept from a full-sequence forward pass.
pub struct ForwardCache {
    slots: Vec<Slot>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Array2<f64>,
}

/// Which rows of the sequence are scored, and against which targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePlan {
    pub slots: Vec<Slot>,
    pub rows: Vec<usize>,
    pub targets: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    tokenizer: Tokenizer,
    params: ParamSet,
    linears: Vec<LinearSpec>,
    layout: Layout,
    adapter: Option<Adapter>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

impl ToyModel {
    pub fn new(config: ToyConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = d * config.ffn_mult;
        let v = tokenizer.vocab_size();
        let n_glyphs = config.glyphs.chars().count() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamSet { names: Vec::new(), tensors: Vec::new() };
        let mut linears = Vec::new();
        let emb_std = 0.5;
        let tok = p.push("embed.tokens".into(), randn(&mut rng, v, d, emb_std));
        let glyph = p.push("embed.glyphs".into(), randn(&mut rng, n_glyphs, d, emb_std));
        let row = p.push("embed.rows".into(), randn(&mut rng, config.max_rows, d, emb_std));
        let col = p.push("embed.cols".into(), randn(&mut rng, config.max_cols, d, emb_std));
        let pos = p.push("embed.positions".into(), randn(&mut rng, config.max_positions, d, emb_std));
        let seg = p.push("embed.segments".into(), randn(&mut rng, 4, d, emb_std));

        let resid_std = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, fan_in: usize, fan_out: usize, gain: f64| {
            let w = p.push(format!("{name}.weight"), randn(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()));
            let b = p.push(format!("{name}.bias"), Array2::zeros((1, fan_out)));
            linears.push(LinearSpec { name, weight: w, bias: b, fan_in, fan_out });
            linears.len() - 1
        };
        let ln = |p: &mut ParamSet, name: String| {
            (
                p.push(format!("{name}.gain"), Array2::ones((1, d))),
                p.push(format!("{name}.bias"), Array2::zeros((1, d))),
            )
        };
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let ln1 = ln(&mut p, format!("layers.{l}.ln1"));
            let q = linear(&mut p, &mut rng, format!("layers.{l}.attn.q"), d, d, 1.0);
            let k = linear(&mut p, &mut rng, format!("layers.{l}.attn.k"), d, d, 1.0);
            let vv = linear(&mut p, &mut rng, format!("layers.{l}.attn.v"), d, d, 1.0);
            let o = linear(&mut p, &mut rng, format!("layers.{l}.attn.o"), d, d, resid_std);
            let ln2 = ln(&mut p, format!("layers.{l}.ln2"));
            let up = linear(&mut p, &mut rng, format!("layers.{l}.mlp.up"), d, f, 1.0);
            let down = linear(&mut p, &mut rng, format!("layers.{l}.mlp.down"), f, d, resid_std);
            layers.push(LayerIdx { ln1, q, k, v: vv, o, ln2, up, down });
        }
        let lnf = ln(&mut p, "final_ln".into());
        let head = linear(&mut p, &mut rng, "head".into(), d, v, 1.0);
        Ok(ToyModel {
            config,
            tokenizer,
            params: p,
            linears,
            layout: Layout { tok, glyph, row, col, pos, seg, layers, lnf, head },
            adapter: None,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn linears(&self) -> &[LinearSpec] {
        &self.linears
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        self.adapter.as_mut()
    }

    /// The model without its adapter.
    pub fn base(&self) -> ToyModel {
        ToyModel { adapter: None, ..self.clone() }
    }

    /// Copy of this (frozen) model with a fresh adapter on every selected
    /// linear layer. `B` factors start at zero, so outputs are unchanged.
    pub fn attach_adapter(&self, cfg: &AdapterConfig) -> Result<ToyModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let layers: Vec<LoraLayer> = self
            .linears
            .iter()
            .enumerate()
            .filter(|(_, l)| cfg.selects(&l.name))
            .map(|(i, l)| LoraLayer {
                name: l.name.clone(),
                linear: i,
                a: randn(&mut rng, l.fan_in, cfg.rank, 1.0 / (l.fan_in as f64).sqrt()),
                b: Array2::zeros((cfg.rank, l.fan_out)),
            })
            .collect();
        if layers.is_empty() {
            return Err(Error::Config(format!(
                "adapter targets {:?} match no linear layer",
                cfg.targets
            )));
        }
        let base_fingerprint = self.base_fingerprint();
        Ok(ToyModel {
            adapter: Some(Adapter { config: cfg.clone(), layers, base_fingerprint }),
            ..self.base()
        })
    }

    pub(crate) fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        for l in &adapter.layers {
            let spec = self
                .linears
                .get(l.linear)
                .filter(|s| s.name == l.name)
                .ok_or_else(|| Error::Checkpoint(format!("no linear layer {:?}", l.name)))?;
            if l.a.dim() != (spec.fan_in, adapter.config.rank) || l.b.dim() != (adapter.config.rank, spec.fan_out) {
                return Err(Error::Checkpoint(format!("shape mismatch for {:?}", l.name)));
            }
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    /// Number of trainable scalars: the adapter factors only.
    pub fn count_trainable(&self) -> Result<usize> {
        self.adapter
            .as_ref()
            .map(Adapter::trainable_count)
            .ok_or_else(|| Error::Config("no adapter attached".into()))
    }

    pub fn base_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.tokenizer).expect("tokenizer serializes"));
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn adapter_checksum(&self) -> Option<String> {
        let a = self.adapter.as_ref()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&a.config).expect("config serializes"));
        for l in &a.layers {
            h.update(l.name.as_bytes());
            for v in l.a.iter().chain(l.b.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        Some(hex::encode(h.finalize()))
    }

    fn lora_for(&self, linear: usize) -> Option<(usize, &LoraLayer)> {
        self.adapter
            .as_ref()?
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.linear == linear)
    }

    // ----- inputs -----

    fn glyph_index(&self, c: Option<char>) -> Option<usize> {
        match c {
            None => Some(self.config.glyphs.chars().count()),
            Some(c) => self.config.glyphs.chars().position(|g| g == c),
        }
    }

    pub fn encode_image(&self, image: &ImageRef) -> Result<Vec<Slot>> {
        let grid: &GlyphGrid = image.as_grid().ok_or_else(|| {
            Error::Input("toy model encodes glyph grids only, not bitmap files".into())
        })?;
        if grid.rows() > self.config.max_rows || grid.cols() > self.config.max_cols {
            return Err(Error::Input(format!(
                "grid {}x{} exceeds {}x{}",
                grid.rows(),
                grid.cols(),
                self.config.max_rows,
                self.config.max_cols
            )));
        }
        grid.cells()
            .map(|(row, col, g)| {
                self.glyph_index(g)
                    .map(|glyph| Slot::Cell { glyph, row, col })
                    .ok_or_else(|| Error::Input(format!("glyph {:?} is not encodable", g.unwrap_or(' '))))
            })
            .collect()
    }

    fn check_token(&self, id: TokenId, pos: usize) -> Result<()> {
        if id as usize >= self.tokenizer.vocab_size() {
            return Err(Error::Input(format!("token id {id} out of vocabulary")));
        }
        if pos >= self.config.max_positions {
            return Err(Error::Input(format!(
                "position {pos} exceeds the model's {} positions",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Position and segment of `token` following a response slot at `prev`.
    fn next_response_slot(&self, prev: (usize, usize), token: TokenId) -> (usize, usize) {
        if self.tokenizer.is_separator(token) {
            (0, SEG_AFTER_SEPARATOR)
        } else {
            (prev.0 + 1, prev.1)
        }
    }

    /// `[cells][instruction][<bos>][response]`.
    pub fn build_sequence(
        &self,
        image: Option<&ImageRef>,
        instruction: &[TokenId],
        response: &[TokenId],
    ) -> Result<Vec<Slot>> {
        let mut slots = match image {
            Some(img) => self.encode_image(img)?,
            None => Vec::new(),
        };
        for (i, &id) in instruction.iter().enumerate() {
            self.check_token(id, i)?;
            slots.push(Slot::Token { id, pos: i, seg: SEG_INSTRUCTION });
        }
        let bos = self.tokenizer.bos();
        slots.push(Slot::Token { id: bos, pos: 0, seg: SEG_RESPONSE });
        let mut at = (0, SEG_RESPONSE);
        for &id in response {
            at = self.next_response_slot(at, id);
            self.check_token(id, at.0)?;
            slots.push(Slot::Token { id, pos: at.0, seg: at.1 });
        }
        Ok(slots)
    }

    /// Rows and targets scored for an example: every masked position of
    /// `instruction ++ response`, plus the terminating `<eos>` when the last
    /// response position is masked.
    pub fn score_plan(&self, ex: &TrainingExample) -> Result<ScorePlan> {
        ex.validate()?;
        let slots = self.build_sequence(ex.image.as_ref(), &ex.instruction_tokens, &ex.response_tokens)?;
        let p = ex.instruction_tokens.len();
        let r = ex.response_tokens.len();
        let n_cells = slots.len() - p - r - 1;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (k, &m) in ex.loss_mask.iter().enumerate() {
            if !m {
                continue;
            }
            if k < p {
                if n_cells + k == 0 {
                    continue;
                }
                rows.push(n_cells + k - 1);
                targets.push(ex.instruction_tokens[k]);
            } else {
                rows.push(n_cells + k);
                targets.push(ex.response_tokens[k - p]);
            }
        }
        if ex.loss_mask.last() == Some(&true) {
            rows.push(n_cells + p + r);
            targets.push(self.tokenizer.eos());
        }
        Ok(ScorePlan { slots, rows, targets })
    }

    fn embed(&self, slots: &[Slot]) -> Array2<f64> {
        let d = self.config.width;
        let t = &self.params.tensors;
        let l = &self.layout;
        let mut x = Array2::zeros((slots.len(), d));
        for (i, s) in slots.iter().enumerate() {
            let mut row = x.row_mut(i);
            match *s {
                Slot::Cell { glyph, row: r, col } => {
                    row += &t[l.glyph].row(glyph);
                    row += &t[l.row].row(r);
                    row += &t[l.col].row(col);
                    row += &t[l.seg].row(SEG_IMAGE);
                }
                Slot::Token { id, pos, seg } => {
                    row += &t[l.tok].row(id as usize);
                    row += &t[l.pos].row(pos);
                    row += &t[l.seg].row(seg);
                }
            }
        }
        x
    }

    // ----- primitives -----

    fn layer_norm(&self, x: &Array2<f64>, (gi, bi): (usize, usize)) -> (Array2<f64>, LnCache) {
        let g = self.params.tensors[gi].row(0);
        let b = self.params.tensors[bi].row(0);
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row *= &g;
            row += &b;
        }
        (y, LnCache { xhat, rstd })
    }

    fn layer_norm_backward(
        &self,
        dy: &Array2<f64>,
        cache: &LnCache,
        (gi, bi): (usize, usize),
        base: Option<&mut Vec<Array2<f64>>>,
    ) -> Array2<f64> {
        let g = self.params.tensors[gi].row(0);
        if let Some(base) = base {
            let dg: Array2<f64> = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            base[gi] += &dg;
            base[bi] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let d = dy.ncols() as f64;
        let mut dx = dy.clone();
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            row *= &g;
            let xh = cache.xhat.row(i);
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let r = cache.rstd[i];
            for (v, &h) in row.iter_mut().zip(xh.iter()) {
                *v = r * (*v - mean_d - h * mean_dx);
            }
        }
        dx
    }

    fn linear(&self, x: &Array2<f64>, li: usize) -> (Array2<f64>, Option<Array2<f64>>) {
        let spec = &self.linears[li];
        let mut y = x.dot(&self.params.tensors[spec.weight]);
        y += &self.params.tensors[spec.bias];
        let mut xa = None;
        if let Some((_, lora)) = self.lora_for(li) {
            let scale = self.adapter.as_ref().map_or(1.0, Adapter::scale);
            let h = x.dot(&lora.a);
            y.scaled_add(scale, &h.dot(&lora.b));
            xa = Some(h);
        }
        (y, xa)
    }

    fn linear_backward(
        &self,
        x: &Array2<f64>,
        xa: Option<&Array2<f64>>,
        dy: &Array2<f64>,
        li: usize,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let spec = &self.linears[li];
        let mut dx = dy.dot(&self.params.tensors[spec.weight].t());
        if let Some(base) = grads.base.as_mut() {
            base[spec.weight] += &x.t().dot(dy);
            base[spec.bias] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if let Some((j, lora)) = self.lora_for(li) {
            let scale = self.adapter.as_ref().map_or(1.0, Adapter::scale);
            let dyb = dy.dot(&lora.b.t());
            dx.scaled_add(scale, &dyb.dot(&lora.a.t()));
            if let Some(lg) = grads.lora.as_mut() {
                let xa = xa.expect("adapter activations cached");
                lg[j].0.scaled_add(scale, &x.t().dot(&dyb));
                lg[j].1.scaled_add(scale, &xa.t().dot(dy));
            }
        }
        dx
    }

    // ----- full-sequence pass -----

    pub fn forward(&self, slots: &[Slot]) -> ForwardCache {
        let d = self.config.width;
        let h = self.config.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = slots.len();
        let mut x = self.embed(slots);
        let mut layers = Vec::with_capacity(self.config.layers);
        for li in &self.layout.layers {
            let (a, ln1) = self.layer_norm(&x, li.ln1);
            let (q, xa_q) = self.linear(&a, li.q);
            let (k, xa_k) = self.linear(&a, li.k);
            let (v, xa_v) = self.linear(&a, li.v);
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(h);
            for hh in 0..h {
                let cols = s![.., hh * dh..(hh + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..n {
                        row[j] = if j <= i { row[j] / sum } else { 0.0 };
                    }
                }
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let (o, xa_o) = self.linear(&ctx, li.o);
            x += &o;
            let (b, ln2) = self.layer_norm(&x, li.ln2);
            let (u, xa_up) = self.linear(&b, li.up);
            let g = u.mapv(gelu);
            let (m, xa_down) = self.linear(&g, li.down);
            x += &m;
            layers.push(LayerCache {
                ln1, a, q, k, v, xa_q, xa_k, xa_v, probs, ctx, xa_o, ln2, b, u, g, xa_up, xa_down,
            });
        }
        let (f, lnf) = self.layer_norm(&x, self.layout.lnf);
        ForwardCache { slots: slots.to_vec(), layers, lnf, f }
    }

    /// Logits at the given rows, plus the adapter activation of the head.
    pub fn head(&self, cache: &ForwardCache, rows: &[usize]) -> (Array2<f64>, Option<Array2<f64>>) {
        let f = cache.f.select(Axis(0), rows);
        self.linear(&f, self.layout.head)
    }

    /// Logits for every row of the sequence.
    pub fn full_logits(&self, slots: &[Slot]) -> Array2<f64> {
        let cache = self.forward(slots);
        let rows: Vec<usize> = (0..slots.len()).collect();
        self.head(&cache, &rows).0
    }

    /// Backpropagates `dlogits` (one row per entry of `rows`) through the
    /// network, accumulating into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        rows: &[usize],
        head_xa: Option<&Array2<f64>>,
        dlogits: ArrayView2<f64>,
        grads: &mut Grads,
    ) {
        let d = self.config.width;
        let h = self.config.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.slots.len();

        let f_rows = cache.f.select(Axis(0), rows);
        let df_rows = self.linear_backward(&f_rows, head_xa, &dlogits.to_owned(), self.layout.head, grads);
        let mut df = Array2::zeros((n, d));
        for (k, &r) in rows.iter().enumerate() {
            let mut row = df.row_mut(r);
            row += &df_rows.row(k);
        }
        let mut dx = self.layer_norm_backward(&df, &cache.lnf, self.layout.lnf, grads.base.as_mut());

        for (li, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            // MLP branch
            let dg = self.linear_backward(&lc.g, lc.xa_down.as_ref(), &dx, li.down, grads);
            let mut du = dg;
            du.zip_mut_with(&lc.u, |d, &u| *d *= gelu_grad(u));
            let db = self.linear_backward(&lc.b, lc.xa_up.as_ref(), &du, li.up, grads);
            dx += &self.layer_norm_backward(&db, &lc.ln2, li.ln2, grads.base.as_mut());

            // attention branch
            let dctx = self.linear_backward(&lc.ctx, lc.xa_o.as_ref(), &dx, li.o, grads);
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for hh in 0..h {
                let cols = s![.., hh * dh..(hh + 1) * dh];
                let p = &lc.probs[hh];
                let dctx_h = dctx.slice(cols);
                let dp = dctx_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
                let mut ds = dp;
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let pr = p.row(i);
                    let dot: f64 = (0..=i).map(|j| pr[j] * row[j]).sum();
                    for j in 0..n {
                        row[j] = if j <= i { pr[j] * (row[j] - dot) * scale } else { 0.0 };
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let mut da = self.linear_backward(&lc.a, lc.xa_q.as_ref(), &dq, li.q, grads);
            da += &self.linear_backward(&lc.a, lc.xa_k.as_ref(), &dk, li.k, grads);
            da += &self.linear_backward(&lc.a, lc.xa_v.as_ref(), &dv, li.v, grads);
            dx += &self.layer_norm_backward(&da, &lc.ln1, li.ln1, grads.base.as_mut());
        }

        if let Some(base) = grads.base.as_mut() {
            let l = &self.layout;
            for (i, s) in cache.slots.iter().enumerate() {
                let g = dx.row(i);
                match *s {
                    Slot::Cell { glyph, row, col } => {
                        let mut t = base[l.glyph].row_mut(glyph);
                        t += &g;
                        let mut t = base[l.row].row_mut(row);
                        t += &g;
                        let mut t = base[l.col].row_mut(col);
                        t += &g;
                        let mut t = base[l.seg].row_mut(SEG_IMAGE);
                        t += &g;
                    }
                    Slot::Token { id, pos, seg } => {
                        let mut t = base[l.tok].row_mut(id as usize);
                        t += &g;
                        let mut t = base[l.pos].row_mut(pos);
                        t += &g;
                        let mut t = base[l.seg].row_mut(seg);
                        t += &g;
                    }
                }
            }
        }
    }

    /// Zero gradients: base parameters when `want_base`, adapter factors when
    /// an adapter is attached.
    pub fn zero_grads(&self, want_base: bool) -> Grads {
        Grads {
            base: want_base.then(|| self.params.zeros_like()),
            lora: self.adapter.as_ref().map(|a| {
                a.layers
                    .iter()
                    .map(|l| (Array2::zeros(l.a.raw_dim()), Array2::zeros(l.b.raw_dim())))
                    .collect()
            }),
        }
    }

    /// Applies `f(param, grad)` to every trainable tensor in the order of
    /// [`Grads::tensors`].
    pub fn trainable_tensors_mut(&mut self, want_base: bool) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        if want_base {
            out.extend(self.params.tensors.iter_mut());
        }
        if let Some(a) = self.adapter.as_mut() {
            for l in a.layers.iter_mut() {
                out.push(&mut l.a);
                out.push(&mut l.b);
            }
        }
        out
    }
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

// ----- incremental decoding -----

struct ToySession<'a> {
    model: &'a ToyModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    // position and segment of the last response slot
    pos: (usize, usize),
    logits: Vec<f64>,
}

impl<'a> ToySession<'a> {
    fn new(model: &'a ToyModel) -> Self {
        let l = model.config.layers;
        ToySession { model, keys: vec![Vec::new(); l], values: vec![Vec::new(); l], len: 0, pos: (0, SEG_RESPONSE), logits: Vec::new() }
    }

    fn feed(&mut self, slot: Slot, want_logits: bool) {
        let m = self.model;
        let d = m.config.width;
        let h = m.config.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = m.embed(&[slot]);
        let t = self.len + 1;
        for (l, li) in m.layout.layers.iter().enumerate() {
            let (a, _) = m.layer_norm(&x, li.ln1);
            let (q, _) = m.linear(&a, li.q);
            let (k, _) = m.linear(&a, li.k);
            let (v, _) = m.linear(&a, li.v);
            self.keys[l].extend(k.iter());
            self.values[l].extend(v.iter());
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut ctx = Array2::zeros((1, d));
            let mut scores = vec![0.0; t];
            for hh in 0..h {
                let off = hh * dh;
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    let dot: f64 = (0..dh).map(|c| q[[0, off + c]] * kj[c]).sum();
                    *sc = dot * scale;
                    max = max.max(*sc);
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                for (j, sc) in scores.iter().enumerate() {
                    let p = sc / sum;
                    let vj = &values[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        ctx[[0, off + c]] += p * vj[c];
                    }
                }
            }
            let (o, _) = m.linear(&ctx, li.o);
            x += &o;
            let (b, _) = m.layer_norm(&x, li.ln2);
            let (u, _) = m.linear(&b, li.up);
            let g = u.mapv(gelu);
            let (mm, _) = m.linear(&g, li.down);
            x += &mm;
        }
        self.len = t;
        if want_logits {
            let (f, _) = m.layer_norm(&x, m.layout.lnf);
            let (logits, _) = m.linear(&f, m.layout.head);
            self.logits = logits.into_raw_vec_and_offset().0;
        }
    }
}

impl DecodeSession for ToySession<'_> {
    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn push(&mut self, token: TokenId) -> Result<()> {
        let (pos, seg) = self.model.next_response_slot(self.pos, token);
        self.model.check_token(token, pos)?;
        self.pos = (pos, seg);
        self.feed(Slot::Token { id: token, pos, seg }, true);
        Ok(())
    }
}

impl ModelInterface for ToyModel {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn fingerprint(&self) -> String {
        match self.adapter_checksum() {
            None => self.base_fingerprint(),
            Some(a) => {
                let mut h = Sha256::new();
                h.update(self.base_fingerprint().as_bytes());
                h.update(a.as_bytes());
                hex::encode(&h.finalize()[..8])
            }
        }
    }

    fn begin<'a>(
        &'a self,
        image: Option<&ImageRef>,
        prompt: &[TokenId],
    ) -> Result<Box<dyn DecodeSession + 'a>> {
        let slots = self.build_sequence(image, prompt, &[])?;
        let mut s = ToySession::new(self);
        let last = slots.len() - 1;
        for (i, slot) in slots.into_iter().enumerate() {
            s.feed(slot, i == last);
        }
        Ok(Box::new(s))
    }

    fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::decode::{generate, DecodeConfig};

    fn small() -> ToyModel {
        let cfg = ToyConfig { width: 16, heads: 2, layers: 2, ..ToyConfig::default() };
        ToyModel::new(cfg, Tokenizer::toy()).unwrap()
    }

    fn image() -> ImageRef {
        ImageRef::glyphs(GlyphGrid::from_text("abc", 5))
    }

    #[test]
    fn logits_shape() {
        let m = small();
        let slots = m.build_sequence(Some(&image()), &[5, 6], &[7, 2, 8]).unwrap();
        let logits = m.full_logits(&slots);
        assert_eq!(logits.dim(), (5 + 2 + 1 + 3, m.tokenizer().vocab_size()));
    }

    #[test]
    fn separator_restarts_positions() {
        let m = small();
        let t = m.tokenizer().clone();
        let sep = t.special(crate::modelkit::tokenizer::TRANSLATION).unwrap();
        let resp = [t.encode("a")[0], t.encode("b")[0], sep, t.encode("c")[0]];
        let slots = m.build_sequence(None, &[9], &resp).unwrap();
        let pos: Vec<(usize, usize)> = slots
            .iter()
            .filter_map(|s| match s {
                Slot::Token { pos, seg, .. } if *seg >= SEG_RESPONSE => Some((*pos, *seg)),
                _ => None,
            })
            .collect();
        let (r, a) = (SEG_RESPONSE, SEG_AFTER_SEPARATOR);
        assert_eq!(pos, [(0, r), (1, r), (2, r), (0, a), (1, a)]);
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = small().attach_adapter(&AdapterConfig::new(2, 4.0, &["*"])).unwrap();
        // give the adapter non-zero B so its path is exercised
        let mut m = m;
        for l in m.adapter_mut().unwrap().layers.iter_mut() {
            l.b.mapv_inplace(|_| 0.01);
        }
        let prompt = [5u32, 6];
        let resp = m.tokenizer().encode("ab");
        let slots = m.build_sequence(Some(&image()), &prompt, &resp).unwrap();
        let full = m.full_logits(&slots);
        let mut s = m.begin(Some(&image()), &prompt).unwrap();
        let n = slots.len();
        for (step, &tok) in resp.iter().enumerate() {
            let row = full.row(n - resp.len() - 1 + step);
            for (a, b) in row.iter().zip(s.logits()) {
                assert!((a - b).abs() < 1e-9);
            }
            s.push(tok).unwrap();
        }
        for (a, b) in full.row(n - 1).iter().zip(s.logits()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_unencodable_images() {
        let m = small();
        let bitmap = ImageRef::Path("page.png".into());
        assert!(matches!(m.begin(Some(&bitmap), &[1]), Err(Error::Input(_))));
        let alien = ImageRef::glyphs(GlyphGrid::from_text("xyz", 3));
        assert!(matches!(m.begin(Some(&alien), &[1]), Err(Error::Input(_))));
        let wide = ImageRef::glyphs(GlyphGrid::from_text("abcdefghij", 10));
        assert!(matches!(m.begin(Some(&wide), &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = small();
        let cfg = DecodeConfig::greedy(6);
        let a = generate(&m, &[5, 6], &image(), &cfg).unwrap();
        let b = generate(&m, &[5, 6], &image(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapter_selector_must_match() {
        let m = small();
        assert!(matches!(
            m.attach_adapter(&AdapterConfig::new(4, 4.0, &["nothing.*"])),
            Err(Error::Config(_))
        ));
        assert!(matches!(m.count_trainable(), Err(Error::Config(_))));
    }

    #[test]
    fn trainable_count_is_rank_times_fan_sum() {
        let m = ToyModel::new(ToyConfig::default(), Tokenizer::toy()).unwrap();
        let a = m.attach_adapter(&AdapterConfig::new(16, 16.0, &["layers.*"])).unwrap();
        let expected: usize = m
            .linears()
            .iter()
            .filter(|l| l.name.starts_with("layers."))
            .map(|l| 16 * (l.fan_in + l.fan_out))
            .sum();
        // per layer: q,k,v,o = 4 * 16 * 128; up/down = 2 * 16 * 320
        assert_eq!(expected, 2 * (4 * 16 * 128 + 2 * 16 * 320));
        assert_eq!(a.count_trainable().unwrap(), expected);
        let a1 = m.attach_adapter(&AdapterConfig::new(1, 1.0, &["layers.0.attn.q"])).unwrap();
        assert_eq!(a1.count_trainable().unwrap(), 64 + 64);
        let a2 = m.attach_adapter(&AdapterConfig::new(2, 1.0, &["layers.0.attn.q"])).unwrap();
        assert_eq!(a2.count_trainable().unwrap(), 2 * a1.count_trainable().unwrap());
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let m = small();
        let a = m.attach_adapter(&AdapterConfig::new(4, 8.0, &["*"])).unwrap();
        let slots = m.build_sequence(Some(&image()), &[5, 6], &[7, 8]).unwrap();
        assert_eq!(m.full_logits(&slots), a.full_logits(&slots));
        assert_ne!(m.fingerprint(), a.fingerprint());
        assert_eq!(a.adapter().unwrap().base_fingerprint, m.fingerprint());
    }
}
