use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::inputs::{TextSequence, VisualSequence, PAD, TEXT_SEGMENT, VISUAL_SEGMENT};
use crate::nn::{AttentionLayout, Graph, NnError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

use super::{EncoderError, ModelConfig};

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln1: Norm,
    ff1: Dense,
    ff2: Dense,
    ln2: Norm,
}

/// Dense -> GELU -> LayerNorm -> Dense classifier.
#[derive(Clone, Copy, Debug)]
struct Head {
    dense: Dense,
    ln: Norm,
    out: Dense,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Ones,
    Zeros,
    Value(f64),
    /// Filled in after construction (phrase table).
    Derived,
}

#[derive(Clone, Debug)]
struct Handles {
    tokens: ParamId,
    phrases: Option<ParamId>,
    position: ParamId,
    segment: ParamId,
    text_ln: Norm,
    visual_ln: Norm,
    region_proj: Dense,
    text: Vec<Block>,
    visual: Vec<Block>,
    mm: Vec<Block>,
    mcr_v: Head,
    mcr_s: Option<Head>,
    itm_dense: Dense,
    itm_out: Dense,
    mlm_dense: Dense,
    mlm_ln: Norm,
    mlm_bias: ParamId,
    tau: ParamId,
}

/// Rows of one sequence inside a batched text encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextSpan {
    pub start: usize,
    /// Token rows including `[CLS]`.
    pub tokens: usize,
    pub phrases: usize,
    /// Total rows including padding.
    pub rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualSpan {
    pub start: usize,
    pub tags: usize,
    pub regions: usize,
}

impl VisualSpan {
    pub fn region_start(&self) -> usize {
        self.start + 1 + self.tags
    }
}

/// Rows of one item inside a multi-modal (or merged) encoding, laid out as
/// `[cls, w.., c.., t.., r..]`; `tags` is zero in the two-stage model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmSpan {
    pub start: usize,
    pub tokens: usize,
    pub phrases: usize,
    pub tags: usize,
    pub regions: usize,
}

impl MmSpan {
    pub fn len(&self) -> usize {
        self.tokens + self.phrases + self.tags + self.regions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn phrase_rows(&self) -> std::ops::Range<usize> {
        let s = self.start + self.tokens;
        s..s + self.phrases
    }

    pub fn tag_rows(&self) -> std::ops::Range<usize> {
        let s = self.start + self.tokens + self.phrases;
        s..s + self.tags
    }

    pub fn region_rows(&self) -> std::ops::Range<usize> {
        let s = self.start + self.tokens + self.phrases + self.tags;
        s..s + self.regions
    }
}

pub struct TextOut {
    pub hidden: Var,
    pub spans: Vec<TextSpan>,
}

impl TextOut {
    pub fn cls_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }
}

pub struct VisualOut {
    pub hidden: Var,
    pub spans: Vec<VisualSpan>,
}

impl VisualOut {
    pub fn cls_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }
}

pub struct MmOut {
    pub hidden: Var,
    /// L2-normalized hidden states at the grounding layer, same row layout.
    pub grounding: Var,
    pub spans: Vec<MmSpan>,
}

impl MmOut {
    pub fn cls_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }
}

/// Values produced for one pair by the full two-stage model.
#[derive(Clone, Debug)]
pub struct EncodedPair<T> {
    pub text: Tensor<T>,
    pub phrases: Tensor<T>,
    pub tags: Tensor<T>,
    pub regions: Tensor<T>,
    pub text_global: Vec<T>,
    pub visual_global: Vec<T>,
    pub grounding_phrases: Tensor<T>,
    pub grounding_regions: Tensor<T>,
    pub multimodal: Tensor<T>,
}

/// Textual, visual and multi-modal encoders with their heads.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    h: Handles,
    inits: Vec<Init>,
}

/// Whether a parameter belongs to the multi-modal stage.
pub fn is_multimodal_param(name: &str) -> bool {
    name.starts_with("mm.") || name.starts_with("head.itm.") || name.starts_with("head.mlm.")
}

struct Builder<T> {
    params: ParamStore<T>,
    inits: Vec<Init>,
}

impl<T: Scalar> Builder<T> {
    fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
    ) -> Result<ParamId, NnError> {
        self.inits.push(init);
        self.params.add(name, Tensor::zeros(shape), decay)
    }

    fn dense(&mut self, name: &str, i: usize, o: usize) -> Result<Dense, NnError> {
        Ok(Dense {
            w: self.add(&format!("{name}.w"), &[i, o], Init::Normal, true)?,
            b: self.add(&format!("{name}.b"), &[o], Init::Zeros, false)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm, NnError> {
        Ok(Norm {
            g: self.add(&format!("{name}.g"), &[d], Init::Ones, false)?,
            b: self.add(&format!("{name}.b"), &[d], Init::Zeros, false)?,
        })
    }

    fn block(&mut self, name: &str, d: usize, ff: usize) -> Result<Block, NnError> {
        Ok(Block {
            q: self.dense(&format!("{name}.q"), d, d)?,
            k: self.dense(&format!("{name}.k"), d, d)?,
            v: self.dense(&format!("{name}.v"), d, d)?,
            o: self.dense(&format!("{name}.o"), d, d)?,
            ln1: self.norm(&format!("{name}.ln1"), d)?,
            ff1: self.dense(&format!("{name}.ff1"), d, ff)?,
            ff2: self.dense(&format!("{name}.ff2"), ff, d)?,
            ln2: self.norm(&format!("{name}.ln2"), d)?,
        })
    }

    fn head(&mut self, name: &str, d: usize, classes: usize) -> Result<Head, NnError> {
        Ok(Head {
            dense: self.dense(&format!("{name}.dense"), d, d)?,
            ln: self.norm(&format!("{name}.ln"), d)?,
            out: self.dense(&format!("{name}.out"), d, classes)?,
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a randomly initialized model. `phrase_tokens[i]` lists the
    /// constituent token ids of phrase class `i`; each phrase embedding starts
    /// as the mean of those token embeddings.
    pub fn new(config: ModelConfig, phrase_tokens: &[Vec<usize>]) -> Result<Self, EncoderError> {
        config.validate()?;
        if phrase_tokens.len() != config.vocab_phrases {
            return Err(EncoderError::InvalidConfig(format!(
                "{} phrase token lists for {} phrases",
                phrase_tokens.len(),
                config.vocab_phrases
            )));
        }
        let d = config.arch.hidden;
        let ff = config.arch.ff;
        let mut b = Builder {
            params: ParamStore::new(),
            inits: Vec::new(),
        };
        let tokens = b.add("emb.tokens", &[config.vocab_tokens, d], Init::Normal, true)?;
        let phrases = if config.vocab_phrases > 0 {
            Some(b.add(
                "emb.phrases",
                &[config.vocab_phrases, d],
                Init::Derived,
                true,
            )?)
        } else {
            None
        };
        let position = b.add(
            "emb.position",
            &[config.arch.caps.num_positions(), d],
            Init::Normal,
            true,
        )?;
        let segment = b.add("emb.segment", &[2, d], Init::Normal, true)?;
        let text_ln = b.norm("text.emb_ln", d)?;
        let visual_ln = b.norm("visual.emb_ln", d)?;
        let region_proj = b.dense("visual.region_proj", config.feat_width, d)?;
        let text = (0..config.arch.layers_text)
            .map(|i| b.block(&format!("text.layer{i}"), d, ff))
            .collect::<Result<_, _>>()?;
        let visual = if config.merged {
            Vec::new()
        } else {
            (0..config.arch.layers_visual)
                .map(|i| b.block(&format!("visual.layer{i}"), d, ff))
                .collect::<Result<_, _>>()?
        };
        let mm = (0..config.arch.layers_mm)
            .map(|i| b.block(&format!("mm.layer{i}"), d, ff))
            .collect::<Result<_, _>>()?;
        let mcr_v = b.head("head.mcr_v", d, config.num_tags)?;
        let mcr_s = if config.vocab_phrases > 0 {
            Some(b.head("head.mcr_s", d, config.vocab_phrases)?)
        } else {
            None
        };
        let itm_dense = b.dense("head.itm.dense", d, d)?;
        let itm_out = b.dense("head.itm.out", d, 2)?;
        let mlm_dense = b.dense("head.mlm.dense", d, d)?;
        let mlm_ln = b.norm("head.mlm.ln", d)?;
        let mlm_bias = b.add("head.mlm.bias", &[config.vocab_tokens], Init::Zeros, false)?;
        let tau = b.add("tau", &[1], Init::Value(config.arch.tau_init), false)?;

        let mut model = Model {
            h: Handles {
                tokens,
                phrases,
                position,
                segment,
                text_ln,
                visual_ln,
                region_proj,
                text,
                visual,
                mm,
                mcr_v,
                mcr_s,
                itm_dense,
                itm_out,
                mlm_dense,
                mlm_ln,
                mlm_bias,
                tau,
            },
            params: b.params,
            inits: b.inits,
            config,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.arch.seed);
        model.initialize(&mut rng, |_| true);
        model.init_phrases(phrase_tokens)?;
        Ok(model)
    }

    fn initialize(&mut self, rng: &mut ChaCha8Rng, select: impl Fn(&str) -> bool) {
        let normal = Normal::new(0.0, self.config.arch.init_std).expect("positive std");
        for (id, p) in self.params.iter_mut() {
            if !select(&p.name) {
                continue;
            }
            let fill = |f: &mut dyn FnMut() -> f64, t: &mut Tensor<T>| {
                t.data_mut().iter_mut().for_each(|v| *v = T::lit(f()));
            };
            match self.inits[id.0] {
                Init::Normal => fill(&mut || normal.sample(rng), &mut p.value),
                Init::Ones => fill(&mut || 1.0, &mut p.value),
                Init::Zeros | Init::Derived => fill(&mut || 0.0, &mut p.value),
                Init::Value(x) => fill(&mut || x, &mut p.value),
            }
        }
    }

    fn init_phrases(&mut self, phrase_tokens: &[Vec<usize>]) -> Result<(), EncoderError> {
        let Some(pid) = self.h.phrases else {
            return Ok(());
        };
        let d = self.config.arch.hidden;
        let table = self.params.value(self.h.tokens).clone();
        let mut out = Tensor::zeros(&[phrase_tokens.len(), d]);
        for (i, ids) in phrase_tokens.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let row = out.row_mut(i);
            for &t in ids {
                if t >= table.rows() {
                    return Err(NnError::IndexOutOfRange {
                        op: "phrase init",
                        index: t,
                        bound: table.rows(),
                    }
                    .into());
                }
                for (o, &v) in row.iter_mut().zip(table.row(t)) {
                    *o += v;
                }
            }
            let n = T::lit(ids.len() as f64);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.params.get_mut(pid).value = out;
        Ok(())
    }

    /// Re-draws the multi-modal encoder and its heads from `seed`.
    pub fn reinit_multimodal(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.initialize(&mut rng, is_multimodal_param);
    }

    /// Stage 1 freezes the multi-modal parameters; stage 2 trains everything.
    pub fn set_stage(&mut self, stage: u8) {
        let ids: Vec<(ParamId, bool)> = self
            .params
            .iter()
            .map(|(id, p)| (id, stage != 1 || !is_multimodal_param(&p.name)))
            .collect();
        for (id, t) in ids {
            self.params.set_trainable(id, t);
        }
    }

    pub fn tau(&self) -> T {
        self.params.value(self.h.tau).item()
    }

    pub fn clamp_tau(&mut self) {
        let floor = T::lit(self.config.arch.tau_min);
        let t = &mut self.params.get_mut(self.h.tau).value.data_mut()[0];
        if !(*t >= floor) {
            *t = floor;
        }
    }

    pub fn tau_var(&self, g: &mut Graph<T>) -> Var {
        g.param(&self.params, self.h.tau)
    }

    /// Input embedding of a token id (tags use the same table).
    pub fn token_embedding(&self, id: usize) -> &[T] {
        self.params.value(self.h.tokens).row(id)
    }

    /// Input embedding of phrase class `class`.
    pub fn phrase_embedding(&self, class: usize) -> Option<&[T]> {
        self.h.phrases.map(|p| self.params.value(p).row(class))
    }

    /// Parameter id of the region projection weight and bias.
    pub fn region_projection(&self) -> (ParamId, ParamId) {
        (self.h.region_proj.w, self.h.region_proj.b)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Result<Var, NnError> {
        let w = g.param(&self.params, d.w);
        let b = g.param(&self.params, d.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var, NnError> {
        let gamma = g.param(&self.params, n.g);
        let beta = g.param(&self.params, n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        b: &Block,
        layout: &AttentionLayout,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NnError> {
        let q = self.dense(g, x, b.q)?;
        let k = self.dense(g, x, b.k)?;
        let v = self.dense(g, x, b.v)?;
        let a = g.attention(q, k, v, layout.clone())?;
        let a = self.dense(g, a, b.o)?;
        let a = g.dropout(a, self.config.arch.dropout, rng);
        let x1 = g.add(x, a)?;
        let x1 = self.norm(g, x1, b.ln1)?;
        let f = self.dense(g, x1, b.ff1)?;
        let f = g.gelu(f);
        let f = self.dense(g, f, b.ff2)?;
        let f = g.dropout(f, self.config.arch.dropout, rng);
        let x2 = g.add(x1, f)?;
        self.norm(g, x2, b.ln2)
    }

    /// Runs `blocks` and also returns the output after layer `capture` (1-based).
    fn stack(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        blocks: &[&Block],
        layout: &AttentionLayout,
        capture: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var), NnError> {
        let mut captured = x;
        for (i, b) in blocks.iter().enumerate() {
            x = self.block(g, x, b, layout, rng)?;
            if i + 1 == capture {
                captured = x;
            }
        }
        Ok((x, captured))
    }

    fn embedding_table(&self, g: &mut Graph<T>) -> Result<Var, NnError> {
        let tok = g.param(&self.params, self.h.tokens);
        match self.h.phrases {
            Some(p) => {
                let ph = g.param(&self.params, p);
                g.concat_rows(&[tok, ph])
            }
            None => Ok(tok),
        }
    }

    fn embed_text(
        &self,
        g: &mut Graph<T>,
        seqs: &[&TextSequence],
        pad_to: Option<usize>,
    ) -> Result<(Var, Vec<TextSpan>, Vec<bool>), NnError> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut valid = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = ids.len();
            ids.extend(s.ids());
            positions.extend_from_slice(&s.positions);
            let rows = pad_to.unwrap_or(0).max(s.len());
            valid.extend(std::iter::repeat_n(true, s.len()));
            valid.extend(std::iter::repeat_n(false, rows - s.len()));
            ids.extend(std::iter::repeat_n(PAD, rows - s.len()));
            positions.extend(std::iter::repeat_n(0, rows - s.len()));
            spans.push(TextSpan {
                start,
                tokens: s.tokens.len(),
                phrases: s.phrases.len(),
                rows,
            });
        }
        let table = self.embedding_table(g)?;
        let e = g.embedding(table, &ids)?;
        let pos_t = g.param(&self.params, self.h.position);
        let p = g.embedding(pos_t, &positions)?;
        let seg_t = g.param(&self.params, self.h.segment);
        let s = g.embedding(seg_t, &vec![TEXT_SEGMENT; ids.len()])?;
        let x = g.add(e, p)?;
        let x = g.add(x, s)?;
        Ok((self.norm(g, x, self.h.text_ln)?, spans, valid))
    }

    fn embed_visual(
        &self,
        g: &mut Graph<T>,
        seqs: &[&VisualSequence],
    ) -> Result<(Var, Vec<VisualSpan>), NnError> {
        let width = self.config.feat_width;
        let concept = self.config.arch.caps.concept_position();
        let mut tok_ids = Vec::new();
        let mut feats = Vec::new();
        let mut order = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let n_tok_rows: usize = seqs.iter().map(|s| 1 + s.tags.len()).sum();
        let mut next_region = n_tok_rows;
        let mut rows = 0;
        for s in seqs {
            spans.push(VisualSpan {
                start: rows,
                tags: s.tags.len(),
                regions: s.features.len(),
            });
            order.push(tok_ids.len());
            tok_ids.push(crate::inputs::CLS);
            positions.push(0);
            for &t in &s.tags {
                order.push(tok_ids.len());
                tok_ids.push(t);
                positions.push(concept);
            }
            for f in &s.features {
                if f.len() != width {
                    return Err(NnError::ShapeMismatch {
                        op: "region features",
                        left: vec![f.len()],
                        right: vec![width],
                    });
                }
                feats.extend(f.iter().map(|&v| T::lit(v)));
                order.push(next_region);
                next_region += 1;
                positions.push(concept);
            }
            rows += s.len();
        }
        let table = g.param(&self.params, self.h.tokens);
        let tok = g.embedding(table, &tok_ids)?;
        let parts = if feats.is_empty() {
            tok
        } else {
            let n_regions = feats.len() / width;
            let r = g.constant(Tensor::new(vec![n_regions, width], feats)?);
            let r = self.dense(g, r, self.h.region_proj)?;
            g.concat_rows(&[tok, r])?
        };
        let e = g.gather_rows(parts, &order)?;
        let pos_t = g.param(&self.params, self.h.position);
        let p = g.embedding(pos_t, &positions)?;
        let seg_t = g.param(&self.params, self.h.segment);
        let s = g.embedding(seg_t, &vec![VISUAL_SEGMENT; rows])?;
        let x = g.add(e, p)?;
        let x = g.add(x, s)?;
        Ok((self.norm(g, x, self.h.visual_ln)?, spans))
    }

    fn layout(&self, segments: Vec<(usize, usize)>, valid: Vec<bool>) -> AttentionLayout {
        let layout = AttentionLayout::new(segments, self.config.arch.heads);
        if valid.iter().all(|&v| v) {
            layout
        } else {
            layout.with_key_mask(valid)
        }
    }

    /// Textual encoder over a batch of sequences; `pad_to` appends masked
    /// `[PAD]` rows up to that length.
    pub fn encode_text(
        &self,
        g: &mut Graph<T>,
        seqs: &[&TextSequence],
        pad_to: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TextOut, NnError> {
        let (x, spans, valid) = self.embed_text(g, seqs, pad_to)?;
        let layout = self.layout(spans.iter().map(|s| (s.start, s.rows)).collect(), valid);
        let blocks: Vec<&Block> = self.h.text.iter().collect();
        let (hidden, _) = self.stack(g, x, &blocks, &layout, 0, rng)?;
        Ok(TextOut { hidden, spans })
    }

    pub fn encode_visual(
        &self,
        g: &mut Graph<T>,
        seqs: &[&VisualSequence],
        rng: &mut ChaCha8Rng,
    ) -> Result<VisualOut, NnError> {
        let (x, spans) = self.embed_visual(g, seqs)?;
        let layout = self.layout(
            spans
                .iter()
                .map(|s| (s.start, 1 + s.tags + s.regions))
                .collect(),
            vec![],
        );
        let blocks: Vec<&Block> = self.h.visual.iter().collect();
        let (hidden, _) = self.stack(g, x, &blocks, &layout, 0, rng)?;
        Ok(VisualOut { hidden, spans })
    }

    /// Multi-modal encoder over `w̃ ∥ c̃ ∥ r̃` for each `(text index, visual index)` pair.
    pub fn encode_multimodal(
        &self,
        g: &mut Graph<T>,
        text: &TextOut,
        visual: &VisualOut,
        pairs: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<MmOut, NnError> {
        let text_rows = g.value(text.hidden).rows();
        let mut idx = Vec::new();
        let mut spans = Vec::with_capacity(pairs.len());
        for &(ti, vi) in pairs {
            let ts = text.spans.get(ti).ok_or(NnError::IndexOutOfRange {
                op: "encode_multimodal",
                index: ti,
                bound: text.spans.len(),
            })?;
            let vs = visual.spans.get(vi).ok_or(NnError::IndexOutOfRange {
                op: "encode_multimodal",
                index: vi,
                bound: visual.spans.len(),
            })?;
            spans.push(MmSpan {
                start: idx.len(),
                tokens: ts.tokens,
                phrases: ts.phrases,
                tags: 0,
                regions: vs.regions,
            });
            idx.extend(ts.start..ts.start + ts.tokens + ts.phrases);
            let rs = vs.region_start();
            idx.extend((rs..rs + vs.regions).map(|r| text_rows + r));
        }
        let all = g.concat_rows(&[text.hidden, visual.hidden])?;
        let x = g.gather_rows(all, &idx)?;
        let layout = self.layout(spans.iter().map(|s| (s.start, s.len())).collect(), vec![]);
        let blocks: Vec<&Block> = self.h.mm.iter().collect();
        let (hidden, captured) =
            self.stack(g, x, &blocks, &layout, self.config.arch.wpg_layer, rng)?;
        let grounding = g.l2_normalize(captured);
        Ok(MmOut {
            hidden,
            grounding,
            spans,
        })
    }

    /// Single-stream variant: `[cls, w, c, t, r]` per item through the text
    /// layers then the multi-modal layers.
    pub fn encode_merged(
        &self,
        g: &mut Graph<T>,
        items: &[(&TextSequence, &VisualSequence)],
        rng: &mut ChaCha8Rng,
    ) -> Result<MmOut, NnError> {
        let texts: Vec<&TextSequence> = items.iter().map(|p| p.0).collect();
        let visuals: Vec<&VisualSequence> = items.iter().map(|p| p.1).collect();
        let (te, tspans, _) = self.embed_text(g, &texts, None)?;
        let (ve, vspans) = self.embed_visual(g, &visuals)?;
        let text_rows = g.value(te).rows();
        let mut idx = Vec::new();
        let mut spans = Vec::with_capacity(items.len());
        for (ts, vs) in tspans.iter().zip(&vspans) {
            spans.push(MmSpan {
                start: idx.len(),
                tokens: ts.tokens,
                phrases: ts.phrases,
                tags: vs.tags,
                regions: vs.regions,
            });
            idx.extend(ts.start..ts.start + ts.tokens + ts.phrases);
            idx.extend((vs.start + 1..vs.start + 1 + vs.tags + vs.regions).map(|r| text_rows + r));
        }
        let all = g.concat_rows(&[te, ve])?;
        let x = g.gather_rows(all, &idx)?;
        let layout = self.layout(spans.iter().map(|s| (s.start, s.len())).collect(), vec![]);
        let blocks: Vec<&Block> = self.h.text.iter().chain(&self.h.mm).collect();
        let (hidden, captured) =
            self.stack(g, x, &blocks, &layout, self.config.grounding_depth(), rng)?;
        let grounding = g.l2_normalize(captured);
        Ok(MmOut {
            hidden,
            grounding,
            spans,
        })
    }

    /// L2-normalized `[CLS]` outputs at `rows`.
    pub fn global_embeddings(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var, NnError> {
        let cls = g.gather_rows(hidden, rows)?;
        Ok(g.l2_normalize(cls))
    }

    fn head(&self, g: &mut Graph<T>, x: Var, h: Head) -> Result<Var, NnError> {
        let y = self.dense(g, x, h.dense)?;
        let y = g.gelu(y);
        let y = self.norm(g, y, h.ln)?;
        self.dense(g, y, h.out)
    }

    /// Logits over the tag vocabulary.
    pub fn mcr_visual_logits(&self, g: &mut Graph<T>, rows: Var) -> Result<Var, NnError> {
        self.head(g, rows, self.h.mcr_v)
    }

    /// Logits over the phrase vocabulary.
    pub fn mcr_textual_logits(&self, g: &mut Graph<T>, rows: Var) -> Result<Var, NnError> {
        let h = self
            .h
            .mcr_s
            .ok_or_else(|| NnError::InvalidArgument("model has no phrase vocabulary".into()))?;
        self.head(g, rows, h)
    }

    /// Two-way logits `[no-match, match]`.
    pub fn itm_logits(&self, g: &mut Graph<T>, cls: Var) -> Result<Var, NnError> {
        let y = self.dense(g, cls, self.h.itm_dense)?;
        let y = g.gelu(y);
        self.dense(g, y, self.h.itm_out)
    }

    /// Logits over the token vocabulary, tied to the input token table.
    pub fn mlm_logits(&self, g: &mut Graph<T>, rows: Var) -> Result<Var, NnError> {
        let y = self.dense(g, rows, self.h.mlm_dense)?;
        let y = g.gelu(y);
        let y = self.norm(g, y, self.h.mlm_ln)?;
        let table = g.param(&self.params, self.h.tokens);
        let logits = g.matmul_nt(y, table)?;
        let bias = g.param(&self.params, self.h.mlm_bias);
        g.add_bias(logits, bias)
    }

    /// Runs the full two-stage model on one pair and returns plain values.
    pub fn encode_pair(
        &self,
        text: &TextSequence,
        visual: &VisualSequence,
    ) -> Result<EncodedPair<T>, NnError> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = self.encode_text(&mut g, &[text], None, &mut rng)?;
        let v = self.encode_visual(&mut g, &[visual], &mut rng)?;
        let tg = self.global_embeddings(&mut g, t.hidden, &[0])?;
        let vg = self.global_embeddings(&mut g, v.hidden, &[0])?;
        let mm = self.encode_multimodal(&mut g, &t, &v, &[(0, 0)], &mut rng)?;
        let rows = |g: &Graph<T>, x: Var, r: std::ops::Range<usize>| -> Tensor<T> {
            let v = g.value(x);
            let d = v.row_len();
            Tensor::new(vec![r.len(), d], v.data()[r.start * d..r.end * d].to_vec())
                .expect("row slice")
        };
        let ts = t.spans[0];
        let vs = v.spans[0];
        let ms = mm.spans[0];
        Ok(EncodedPair {
            text: rows(&g, t.hidden, 0..ts.tokens),
            phrases: rows(&g, t.hidden, ts.tokens..ts.tokens + ts.phrases),
            tags: rows(&g, v.hidden, 0..1 + vs.tags),
            regions: rows(
                &g,
                v.hidden,
                vs.region_start()..vs.region_start() + vs.regions,
            ),
            text_global: g.value(tg).data().to_vec(),
            visual_global: g.value(vg).data().to_vec(),
            grounding_phrases: rows(&g, mm.grounding, ms.phrase_rows()),
            grounding_regions: rows(&g, mm.grounding, ms.region_rows()),
            multimodal: g.value(mm.hidden).clone(),
        })
    }
}
