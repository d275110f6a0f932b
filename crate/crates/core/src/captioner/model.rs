use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, MLP_RATIO};
use super::vocab::{Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Linear maps, the LM head included, start at std `1/sqrt(fan_in)`;
/// embedding tables at this std.
const EMBED_INIT_STD: f64 = 0.5;

/// Config hash and seed of the run that produced a file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter, in storage order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let hidden = MLP_RATIO * d;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        push(format!("{prefix}.g"), vec![d], Init::Ones);
        push(format!("{prefix}.b"), vec![d], Init::Zeros);
    };
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, i: usize, o: usize| {
        push(format!("{prefix}.w"), vec![i, o], Init::Normal((1.0 / i as f64).sqrt()));
        push(format!("{prefix}.b"), vec![o], Init::Zeros);
    };

    linear(&mut push, "patch", c.patch_dim(), d);
    push("cls".into(), vec![1, d], Init::Normal(EMBED_INIT_STD));
    push("pos".into(), vec![c.num_tokens(), d], Init::Normal(EMBED_INIT_STD));
    for l in 0..c.n_encoder_layers {
        ln(&mut push, &format!("enc{l}.ln1"));
        linear(&mut push, &format!("enc{l}.attn.qkv"), d, 3 * d);
        linear(&mut push, &format!("enc{l}.attn.out"), d, d);
        ln(&mut push, &format!("enc{l}.ln2"));
        linear(&mut push, &format!("enc{l}.mlp.fc1"), d, hidden);
        linear(&mut push, &format!("enc{l}.mlp.fc2"), hidden, d);
    }
    ln(&mut push, "enc.ln");
    push("tok_emb".into(), vec![c.vocab_size, d], Init::Normal(EMBED_INIT_STD));
    push(
        "dec_pos".into(),
        vec![c.max_caption_len, d],
        Init::Normal(EMBED_INIT_STD),
    );
    for l in 0..c.n_decoder_layers {
        ln(&mut push, &format!("dec{l}.ln1"));
        linear(&mut push, &format!("dec{l}.self.qkv"), d, 3 * d);
        linear(&mut push, &format!("dec{l}.self.out"), d, d);
        ln(&mut push, &format!("dec{l}.ln2"));
        linear(&mut push, &format!("dec{l}.cross.q"), d, d);
        linear(&mut push, &format!("dec{l}.cross.kv"), d, 2 * d);
        linear(&mut push, &format!("dec{l}.cross.out"), d, d);
        ln(&mut push, &format!("dec{l}.ln3"));
        linear(&mut push, &format!("dec{l}.mlp.fc1"), d, hidden);
        linear(&mut push, &format!("dec{l}.mlp.fc2"), hidden, d);
    }
    ln(&mut push, "dec.ln");
    linear(&mut push, "lm", d, c.vocab_size);
    specs
}

/// Parameters of the captioner: ViT-style patch encoder and a causal
/// decoder with cross-attention over every encoder token.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub provenance: Provenance,
    params: Vec<Tensor>,
}

impl CaptionModel {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(vec![format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            })
            .collect();
        Ok(CaptionModel {
            config,
            vocab,
            provenance: Provenance::default(),
            params,
        })
    }

    pub(crate) fn from_params(
        config: ModelConfig,
        vocab: Vocabulary,
        provenance: Provenance,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let specs = param_specs(&config);
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(&params)
                .any(|((_, s, _), p)| s.as_slice() != p.shape())
        {
            return Err(Error::Malformed("parameter layout does not match config".into()));
        }
        Ok(CaptionModel {
            config,
            vocab,
            provenance,
            params,
        })
    }

    /// Total scalar parameter count for a config.
    pub fn param_count_for(config: &ModelConfig) -> usize {
        param_specs(config)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        param_specs(&self.config).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len());
        for (new, old) in params.iter().zip(&self.params) {
            assert_eq!(new.shape(), old.shape());
        }
        self.params = params;
    }

    /// A fresh graph with every parameter bound as a leaf.
    pub fn session(&self, trainable: bool) -> Session<'_> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| graph.leaf(p.clone(), trainable)).collect();
        let params = Bound::new(&self.config, &vars);
        Session {
            model: self,
            graph,
            params,
            all_params: vars,
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let mut s = self.session(false);
        let x = s.image(image, false)?;
        let enc = s.encode(x)?;
        Ok((s.graph.value(enc.features).clone(), s.trace(&enc)))
    }

    /// Teacher-forced LM loss of `caption` given `image`.
    pub fn lm_loss(&self, image: &Tensor, caption: &[usize]) -> Result<f64> {
        let mut s = self.session(false);
        let x = s.image(image, false)?;
        let (loss, _) = s.lm_loss(x, caption)?;
        Ok(s.graph.value(loss).item())
    }

    /// Greedy decode; the returned tokens follow `[BOS]` and end with
    /// `[EOS]` unless the length limit was hit first.
    pub fn generate_greedy(&self, image: &Tensor) -> Result<Vec<usize>> {
        let mut s = self.session(false);
        let x = s.image(image, false)?;
        let enc = s.encode(x)?;
        let memory = s.memory(enc.features)?;
        s.greedy(&memory)
    }

    pub fn caption(&self, image: &Tensor) -> Result<String> {
        Ok(self.vocab.decode(&self.generate_greedy(image)?))
    }
}

/// Post-softmax encoder self-attention of one forward pass; one
/// `[heads, T, T]` tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].shape()[1]
    }
}

/// Encoder outputs still live in the session graph.
pub struct Encoded {
    /// Patch embeddings with CLS, `[T, d_model]`, before positional terms
    /// are mixed by attention.
    pub embeddings: Var,
    pub features: Var,
    /// `attention[layer][head]`, each `[T, T]`.
    pub attention: Vec<Vec<Var>>,
}

/// Per decoder layer, per head: `(K^T [head_dim, T], V [T, head_dim])`.
pub struct Memory {
    heads: Vec<Vec<(Var, Var)>>,
}

#[derive(Clone, Copy)]
struct Ln {
    g: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct Linear {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct EncoderBlock {
    ln1: Ln,
    qkv: Linear,
    out: Linear,
    ln2: Ln,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy)]
struct DecoderBlock {
    ln1: Ln,
    self_qkv: Linear,
    self_out: Linear,
    ln2: Ln,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    ln3: Ln,
    fc1: Linear,
    fc2: Linear,
}

struct Bound {
    patch: Linear,
    cls: Var,
    pos: Var,
    encoder: Vec<EncoderBlock>,
    enc_ln: Ln,
    tok_emb: Var,
    dec_pos: Var,
    decoder: Vec<DecoderBlock>,
    dec_ln: Ln,
    lm: Linear,
}

impl Bound {
    fn new(c: &ModelConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list matches layout");
        macro_rules! ln {
            () => {
                Ln { g: next(), b: next() }
            };
        }
        macro_rules! lin {
            () => {
                Linear { w: next(), b: next() }
            };
        }
        let patch = lin!();
        let cls = next();
        let pos = next();
        let encoder = (0..c.n_encoder_layers)
            .map(|_| EncoderBlock {
                ln1: ln!(),
                qkv: lin!(),
                out: lin!(),
                ln2: ln!(),
                fc1: lin!(),
                fc2: lin!(),
            })
            .collect();
        let enc_ln = ln!();
        let tok_emb = next();
        let dec_pos = next();
        let decoder = (0..c.n_decoder_layers)
            .map(|_| DecoderBlock {
                ln1: ln!(),
                self_qkv: lin!(),
                self_out: lin!(),
                ln2: ln!(),
                cross_q: lin!(),
                cross_kv: lin!(),
                cross_out: lin!(),
                ln3: ln!(),
                fc1: lin!(),
                fc2: lin!(),
            })
            .collect();
        let dec_ln = ln!();
        let lm = lin!();
        Bound {
            patch,
            cls,
            pos,
            encoder,
            enc_ln,
            tok_emb,
            dec_pos,
            decoder,
            dec_ln,
            lm,
        }
    }
}

/// One forward/backward graph over a model's parameters.
pub struct Session<'m> {
    pub model: &'m CaptionModel,
    pub graph: Graph,
    params: Bound,
    all_params: Vec<Var>,
}

impl Session<'_> {
    /// Parameter leaves in storage order.
    pub fn param_vars(&self) -> &[Var] {
        &self.all_params
    }

    /// Binds an image after checking it has the model's `[C, H, W]` shape.
    pub fn image(&mut self, image: &Tensor, requires_grad: bool) -> Result<Var> {
        self.check_image(image.shape())?;
        Ok(self.graph.leaf(image.clone(), requires_grad))
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let expected = self.model.config.image_shape();
        if shape != expected {
            return Err(Error::shape("image", shape, &expected));
        }
        Ok(())
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let y = self.graph.matmul(x, l.w)?;
        self.graph.add_row(y, l.b)
    }

    fn ln(&mut self, x: Var, l: &Ln) -> Result<Var> {
        self.graph.layer_norm(x, l.g, l.b)
    }

    /// `[T, d_model]` tokens: CLS, then projected patches in row-major
    /// order, plus positional embeddings.
    pub fn patchify(&mut self, image: Var) -> Result<Var> {
        self.check_image(self.graph.shape(image))?;
        let c = &self.model.config;
        let index = c.patch_index();
        let shape = [c.num_patches(), c.patch_dim()];
        let patches = self.graph.gather(image, &index, &shape)?;
        let patch = self.params.patch;
        let projected = self.linear(patches, &patch)?;
        let tokens = self.graph.concat_rows(&[self.params.cls, projected])?;
        self.graph.add(tokens, self.params.pos)
    }

    fn attention_heads(
        &mut self,
        q_src: Var,
        q_offset: usize,
        kv_heads: &[(Var, Var)],
        mask: Option<&Tensor>,
        probs_out: &mut Vec<Var>,
    ) -> Result<Var> {
        let dh = self.model.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(kv_heads.len());
        for (h, &(kt, v)) in kv_heads.iter().enumerate() {
            let q = self.graph.slice_cols(q_src, q_offset + h * dh, dh)?;
            let scores = self.graph.matmul(q, kt)?;
            let mut scores = self.graph.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.graph.add_const(scores, m)?;
            }
            let p = self.graph.softmax(scores)?;
            probs_out.push(p);
            outs.push(self.graph.matmul(p, v)?);
        }
        self.graph.concat_cols(&outs)
    }

    fn split_kv(&mut self, kv: Var, k_offset: usize, v_offset: usize) -> Result<Vec<(Var, Var)>> {
        let c = &self.model.config;
        let (heads, dh) = (c.n_heads, c.head_dim());
        (0..heads)
            .map(|h| {
                let k = self.graph.slice_cols(kv, k_offset + h * dh, dh)?;
                let kt = self.graph.transpose(k)?;
                let v = self.graph.slice_cols(kv, v_offset + h * dh, dh)?;
                Ok((kt, v))
            })
            .collect()
    }

    pub fn encode(&mut self, image: Var) -> Result<Encoded> {
        let embeddings = self.patchify(image)?;
        let d = self.model.config.d_model;
        let mut x = embeddings;
        let mut attention = Vec::with_capacity(self.params.encoder.len());
        let blocks = self.params.encoder.clone();
        for b in &blocks {
            let h = self.ln(x, &b.ln1)?;
            let qkv = self.linear(h, &b.qkv)?;
            let kv = self.split_kv(qkv, d, 2 * d)?;
            let mut probs = Vec::new();
            let o = self.attention_heads(qkv, 0, &kv, None, &mut probs)?;
            attention.push(probs);
            let o = self.linear(o, &b.out)?;
            x = self.graph.add(x, o)?;
            let h = self.ln(x, &b.ln2)?;
            let h = self.linear(h, &b.fc1)?;
            let h = self.graph.gelu(h);
            let h = self.linear(h, &b.fc2)?;
            x = self.graph.add(x, h)?;
        }
        let enc_ln = self.params.enc_ln;
        let features = self.ln(x, &enc_ln)?;
        Ok(Encoded {
            embeddings,
            features,
            attention,
        })
    }

    /// Materializes the attention probabilities of an encoder pass.
    pub fn trace(&self, enc: &Encoded) -> AttentionTrace {
        let layers = enc
            .attention
            .iter()
            .map(|heads| {
                let t = self.graph.shape(heads[0])[0];
                let mut data = Vec::with_capacity(heads.len() * t * t);
                for &h in heads {
                    data.extend_from_slice(self.graph.value(h).data());
                }
                Tensor::from_parts(vec![heads.len(), t, t], data)
            })
            .collect();
        AttentionTrace { layers }
    }

    /// Cross-attention keys and values of every decoder layer.
    pub fn memory(&mut self, features: Var) -> Result<Memory> {
        let d = self.model.config.d_model;
        let blocks = self.params.decoder.clone();
        let heads = blocks
            .iter()
            .map(|b| {
                let kv = self.linear(features, &b.cross_kv)?;
                self.split_kv(kv, 0, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Memory { heads })
    }

    /// Next-token logits `[n, vocab]` for a token prefix of length `n`.
    pub fn decode(&mut self, memory: &Memory, tokens: &[usize]) -> Result<Var> {
        let c = &self.model.config;
        let n = tokens.len();
        if n == 0 || n > c.max_caption_len {
            return Err(Error::invalid(format!(
                "decoder input length {n} outside 1..={}",
                c.max_caption_len
            )));
        }
        let (d, heads) = (c.d_model, c.n_heads);
        let positions: Vec<usize> = (0..n).collect();
        let causal = Tensor::from_fn(&[n, n], |i| if i % n > i / n { f64::NEG_INFINITY } else { 0.0 });
        let tok = self.graph.embedding(self.params.tok_emb, tokens)?;
        let pos = self.graph.embedding(self.params.dec_pos, &positions)?;
        let mut x = self.graph.add(tok, pos)?;
        let blocks = self.params.decoder.clone();
        for (b, mem) in blocks.iter().zip(&memory.heads) {
            let h = self.ln(x, &b.ln1)?;
            let qkv = self.linear(h, &b.self_qkv)?;
            let kv = self.split_kv(qkv, d, 2 * d)?;
            let mut sink = Vec::with_capacity(heads);
            let o = self.attention_heads(qkv, 0, &kv, Some(&causal), &mut sink)?;
            let o = self.linear(o, &b.self_out)?;
            x = self.graph.add(x, o)?;

            let h = self.ln(x, &b.ln2)?;
            let q = self.linear(h, &b.cross_q)?;
            sink.clear();
            let o = self.attention_heads(q, 0, mem, None, &mut sink)?;
            let o = self.linear(o, &b.cross_out)?;
            x = self.graph.add(x, o)?;

            let h = self.ln(x, &b.ln3)?;
            let h = self.linear(h, &b.fc1)?;
            let h = self.graph.gelu(h);
            let h = self.linear(h, &b.fc2)?;
            x = self.graph.add(x, h)?;
        }
        let dec_ln = self.params.dec_ln;
        let h = self.ln(x, &dec_ln)?;
        let lm = self.params.lm;
        self.linear(h, &lm)
    }

    /// Checks `[BOS] w1..wk [EOS] [PAD]*` with `k >= 1`.
    fn check_caption(&self, caption: &[usize]) -> Result<()> {
        let max = self.model.config.max_caption_len;
        let vocab = self.model.config.vocab_size;
        if caption.len() < 3 || caption[0] != BOS {
            return Err(Error::invalid("caption must be [BOS] w1..wk [EOS] with k >= 1"));
        }
        if caption.len() > max {
            return Err(Error::invalid(format!(
                "caption of {} tokens exceeds {max}",
                caption.len()
            )));
        }
        let eos = caption
            .iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| Error::invalid("caption has no [EOS]"))?;
        if eos < 2 {
            return Err(Error::invalid("empty caption"));
        }
        if caption[1..eos].iter().any(|&t| t < UNK || t >= vocab) {
            return Err(Error::invalid("caption body must contain word tokens only"));
        }
        if caption[eos + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::invalid("only [PAD] may follow [EOS]"));
        }
        Ok(())
    }

    /// Teacher-forced next-token cross-entropy; `[PAD]` targets are ignored.
    pub fn lm_loss(&mut self, image: Var, caption: &[usize]) -> Result<(Var, Encoded)> {
        self.lm_loss_excluding(image, caption, &[], 0.0)
    }

    /// [`lm_loss`](Self::lm_loss) with the softmax restricted to the
    /// vocabulary minus `excluded`, whose logits receive no gradient, and
    /// `smoothing` label mass spread over the remaining tokens.
    pub fn lm_loss_excluding(
        &mut self,
        image: Var,
        caption: &[usize],
        excluded: &[usize],
        smoothing: f64,
    ) -> Result<(Var, Encoded)> {
        self.check_caption(caption)?;
        let enc = self.encode(image)?;
        let memory = self.memory(enc.features)?;
        let loss = self.caption_loss_excluding(&memory, caption, excluded, smoothing)?;
        Ok((loss, enc))
    }

    /// LM loss of `caption` against an already computed memory.
    pub fn caption_loss(&mut self, memory: &Memory, caption: &[usize]) -> Result<Var> {
        self.caption_loss_excluding(memory, caption, &[], 0.0)
    }

    pub fn caption_loss_excluding(
        &mut self,
        memory: &Memory,
        caption: &[usize],
        excluded: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        self.check_caption(caption)?;
        let vocab = self.model.config.vocab_size;
        if let Some(&t) = excluded.iter().find(|&&t| t >= vocab || caption.contains(&t)) {
            return Err(Error::invalid(format!(
                "token {t} cannot be excluded from this caption's softmax"
            )));
        }
        let n = caption.len();
        let mut logits = self.decode(memory, &caption[..n - 1])?;
        if !excluded.is_empty() {
            let mut row = vec![0.0; vocab];
            excluded.iter().for_each(|&t| row[t] = f64::NEG_INFINITY);
            let bias = Tensor::from_fn(&[n - 1, vocab], |i| row[i % vocab]);
            logits = self.graph.add_const(logits, &bias)?;
        }
        self.graph.cross_entropy_smoothed(logits, &caption[1..], PAD, smoothing)
    }

    /// Greedy decoding, ties broken toward the lowest token id.
    pub fn greedy(&mut self, memory: &Memory) -> Result<Vec<usize>> {
        let max = self.model.config.max_caption_len;
        let mut prefix = vec![BOS];
        while prefix.len() < max {
            let logits = self.decode(memory, &prefix)?;
            let value = self.graph.value(logits);
            let row = value.data().chunks_exact(value.last_dim()).last().expect("non-empty");
            let next = argmax(row);
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(prefix.split_off(1))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
