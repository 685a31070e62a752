"""Compact transformer encoder-decoder over a frozen backbone.

The decoder consumes the full target sequence (prompt + words + end marker)
under a causal mask, so its per-head self-attention maps are square over the
token positions; those maps are what the guidance machinery consumes. Output
logits are shifted so that row n depends only on tokens strictly before n.

Bottleneck adapters (down-project, GELU, up-project, residual) sit after the
attention sub-block and after the feed-forward sub-block of every layer; with
zero-initialised up-projections they are exact identities, so inserting them
does not change the backbone function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numerics import (
    Parameter,
    Tensor,
    attention_map,
    embedding,
    gelu,
    layer_norm,
    no_grad,
    shift_rows,
)

SOT, ZH, EN, TRANS, NOTS, EOT, BLNK = range(7)
SPECIAL_STRINGS = ("<sot>", "<zh>", "<en>", "<trans>", "<nots>", "<eot>", "<blnk>")

LANG_A = "A"
LANG_B = "B"


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    width: int = 64
    ffn_width: int = 256
    bottleneck: int = 8
    feat_dim: int = 16
    max_len: int = 64
    # Decoder self-attention heads per layer (layers above the first) that
    # carry a fixed additive score prior toward key positions holding an
    # LID token. A from-scratch desk-scale backbone parks every head's spare
    # attention on the start token and never develops LID-attending heads on
    # its own; the prior builds them in architecturally, the way a causal
    # mask or an ALiBi slope is built in. Content scores add on top, so
    # training decides how each anchored head actually distributes mass
    # between (and beyond) the two LID columns.
    anchored_heads: int = 3
    anchor_strength: float = 3.0
    # Language-contrast seeding: word embeddings start with a +-polarity
    # component along a shared language direction, and anchored heads' query
    # projections couple that direction to the zh-minus-en key coordinate.
    # This gives the guidance loss a first-order handle for routing rows to
    # their own language's column; with the step budget of the default recipe
    # a bottleneck adapter cannot grow such a circuit from scratch.
    embed_polarity: float = 0.05
    anchor_contrast: float = 0.5

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "heads", "width", "ffn_width",
                     "bottleneck", "feat_dim", "max_len"):
            if getattr(self, name) < 1:
                raise DataError(f"model config field {name} must be positive")
        if self.width % self.heads != 0:
            raise DataError("width must be divisible by the head count")
        if self.anchored_heads < 0:
            raise DataError("anchored_heads must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def anchored_head_ids(self) -> tuple[int, ...]:
        """Anchored head indices, capped at the per-layer head count."""
        spread = [h for h in range(self.heads) if h % 2 == 1]
        spread += [h for h in range(self.heads) if h % 2 == 0]
        return tuple(sorted(spread[:min(self.anchored_heads, self.heads)]))


class Vocabulary:
    """Token inventory: seven special tokens followed by the two word sets.

    Word tokens are partitioned into language A and language B; each carries
    exactly one language tag. The two language-ID tokens are <zh> (language A)
    and <en> (language B).
    """

    def __init__(self, words_a: list[str], words_b: list[str],
                 specials: tuple[str, ...] = SPECIAL_STRINGS):
        tokens = list(specials) + list(words_a) + list(words_b)
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        self.specials = tuple(specials)
        self._strings = tokens
        self._ids = {s: i for i, s in enumerate(tokens)}
        self.n_words_a = len(words_a)
        self.n_words_b = len(words_b)
        n_special = len(specials)
        self._a_range = range(n_special, n_special + len(words_a))
        self._b_range = range(n_special + len(words_a), len(tokens))

    @classmethod
    def build(cls, n_a: int = 40, n_b: int = 40) -> "Vocabulary":
        return cls([f"A{i:02d}" for i in range(n_a)],
                   [f"B{i:02d}" for i in range(n_b)])

    @property
    def size(self) -> int:
        return len(self._strings)

    def id(self, token: str) -> int:
        if token not in self._ids:
            raise DataError(f"vocabulary is missing token {token!r}")
        return self._ids[token]

    def string(self, token_id: int) -> str:
        return self._strings[token_id]

    def lang(self, token_id: int) -> str | None:
        if token_id in self._a_range:
            return LANG_A
        if token_id in self._b_range:
            return LANG_B
        return None

    def is_special(self, token_id: int) -> bool:
        return token_id < len(self.specials)

    def word_ids(self, lang: str) -> list[int]:
        return list(self._a_range if lang == LANG_A else self._b_range)

    @property
    def omega_ids(self) -> tuple[int, int]:
        """Token ids of the two language-ID tokens."""
        return (self.id("<zh>"), self.id("<en>"))


def build_prompt(vocab: Vocabulary, lang: str | None = None) -> list[int]:
    """Decoder prompt: bilingual form by default, monolingual when `lang` given."""
    sot = vocab.id("<sot>")
    zh = vocab.id("<zh>")
    en = vocab.id("<en>")
    trans = vocab.id("<trans>")
    nots = vocab.id("<nots>")
    if lang is None:
        return [sot, zh, en, trans, nots]
    if lang == LANG_A:
        return [sot, zh, trans, nots]
    if lang == LANG_B:
        return [sot, en, trans, nots]
    raise DataError(f"unknown language {lang!r}")


@dataclass
class TokenSequence:
    """Prompt tokens plus word tokens and the end marker, with language tags."""

    ids: list[int]
    lang_tags: list[str | None]
    lid_positions: tuple[int, ...]

    @classmethod
    def from_words(cls, vocab: Vocabulary, word_ids: list[int],
                   lang: str | None = None) -> "TokenSequence":
        prompt = build_prompt(vocab, lang)
        tags: list[str | None] = [None] * len(prompt)
        for w in word_ids:
            tag = vocab.lang(w)
            if tag is None:
                raise DataError(f"token {w} is not a word token")
            tags.append(tag)
        ids = prompt + list(word_ids) + [vocab.id("<eot>")]
        tags.append(None)
        lid_positions = (1, 2) if lang is None else (1,)
        return cls(ids=ids, lang_tags=tags, lid_positions=lid_positions)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def word_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.lang_tags) if t is not None]

    def validate(self, vocab: Vocabulary, max_len: int) -> None:
        if self.n > max_len:
            raise DataError(f"sequence length {self.n} exceeds maximum {max_len}")
        if len(self.lang_tags) != self.n:
            raise DataError("language tags must cover every token")
        if self.lid_positions == (1, 2):
            if self.ids[:5] != build_prompt(vocab):
                raise DataError("bilingual sequence must begin with the five-token prompt")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ForwardOut:
    """Teacher-forced forward outputs.

    `logits[b, n]` is the next-token distribution over the vocabulary given
    tokens strictly before position n (row 0 is a constant zero row).
    `next_logits[b]` predicts the token that would follow the full input.
    `attention[l]` holds the decoder self-attention maps, shape (B, H, N, N).
    """

    logits: Tensor
    next_logits: Tensor
    attention: list[Tensor]


@dataclass
class AdapterSummary:
    adapter_count: int
    backbone_count: int

    @property
    def fraction(self) -> float:
        return self.adapter_count / (self.adapter_count + self.backbone_count)

    def format(self) -> str:
        return f"{self.adapter_count:,} ({self.fraction:.1%})"


def is_adapter_param(name: str) -> bool:
    return "_adapter." in name


def adapter_apply(x, down_w, down_b, up_w, up_b) -> Tensor:
    """Residual bottleneck: x + Up(gelu(Down(x)))."""
    hidden = gelu(x @ down_w + down_b)
    return x + (hidden @ up_w + up_b)


class Seq2SeqModel:
    """Encoder-decoder with per-head attention extraction and adapters.

    Parameters live in a flat name-to-Parameter map; adapter parameters are
    the ones whose names contain an ``_adapter.`` segment. The model is
    immutable during inference; training mutates parameters in place and must
    own the model exclusively.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Parameter] = {}
        self.has_adapters = False
        self._init_backbone(np.random.default_rng(seed))

    # -- construction --------------------------------------------------------

    def _add(self, name: str, data) -> Parameter:
        if name in self.params:
            raise DataError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def _init_backbone(self, rng) -> None:
        c = self.config
        w, ff, m = c.width, c.ffn_width, self.vocab.size
        std = 0.02
        # residual-branch outputs start smaller so deep stacks stay stable
        res_std = std / math.sqrt(2.0 * max(c.enc_layers, c.dec_layers))

        def normal(*shape, scale=std):
            return rng.normal(0.0, scale, shape)

        def add_attn(prefix: str) -> None:
            for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
                scale = res_std if proj == "out_proj" else std
                self._add(f"{prefix}.{proj}.weight", normal(w, w, scale=scale))
                self._add(f"{prefix}.{proj}.bias", np.zeros(w))

        # input projection sees a 3-frame window so word boundaries (where
        # adjacent frames jump between clusters) are linearly visible
        self._add("enc.in_proj.weight", normal(3 * c.feat_dim, w))
        self._add("enc.in_proj.bias", np.zeros(w))
        self._add("enc.pos.weight", normal(c.max_len, w))
        for i in range(c.enc_layers):
            p = f"enc.{i}."
            self._add_ln(p + "ln1")
            add_attn(p + "attn")
            self._add_ln(p + "ln2")
            self._add(p + "ffn.fc1.weight", normal(w, ff))
            self._add(p + "ffn.fc1.bias", np.zeros(ff))
            self._add(p + "ffn.fc2.weight", normal(ff, w, scale=res_std))
            self._add(p + "ffn.fc2.bias", np.zeros(w))
        self._add_ln("enc.ln_out")

        self._add("dec.embed.weight", normal(m, w))
        self._add("dec.pos.weight", normal(c.max_len, w))
        for i in range(c.dec_layers):
            p = f"dec.{i}."
            self._add_ln(p + "ln1")
            add_attn(p + "self_attn")
            self._add_ln(p + "ln2")
            add_attn(p + "cross_attn")
            self._add_ln(p + "ln3")
            self._add(p + "ffn.fc1.weight", normal(w, ff))
            self._add(p + "ffn.fc1.bias", np.zeros(ff))
            self._add(p + "ffn.fc2.weight", normal(ff, w, scale=res_std))
            self._add(p + "ffn.fc2.bias", np.zeros(w))
        self._add_ln("dec.ln_out")
        self._add("dec.out_proj.weight", normal(w, m))
        self._add("dec.out_proj.bias", np.zeros(m))
        if c.anchored_heads:
            self._seed_lid_contrast(rng)

    def _seed_lid_contrast(self, rng) -> None:
        """Seed the language-contrast circuit of the anchored heads.

        Word embeddings get a +-polarity component along a shared language
        direction g. Each anchored head receives the zh-minus-en key direction
        on a private key coordinate, and its query projection couples g to the
        same coordinate with the sign that routes language-A rows toward the
        zh column. The fixed score prior (applied in the forward pass)
        supplies mass on the LID columns; this seeding supplies a steerable,
        sign-correct contrast that training may amplify, shrink, or repurpose."""
        c = self.config
        if c.dec_layers < 2:
            return
        d = c.head_dim

        def normed(x):
            mu = x.mean()
            sd = math.sqrt(((x - mu) ** 2).mean() + 1e-5)
            return (x - mu) / sd

        embed = self.params["dec.embed.weight"].data
        g = rng.normal(size=c.width)
        g /= np.linalg.norm(g)
        for word in self.vocab.word_ids(LANG_A):
            embed[word] += c.embed_polarity * g
        for word in self.vocab.word_ids(LANG_B):
            embed[word] -= c.embed_polarity * g

        pos = self.params["dec.pos.weight"].data
        v_diff = normed(embed[ZH] + pos[1]) - normed(embed[EN] + pos[2])
        v_diff /= np.linalg.norm(v_diff)
        for layer in range(1, c.dec_layers):
            for head in c.anchored_head_ids:
                w = rng.normal(size=d)
                w /= np.linalg.norm(w)
                sl = slice(head * d, (head + 1) * d)
                self.params[f"dec.{layer}.self_attn.k_proj.weight"].data[:, sl] += \
                    np.outer(v_diff, w)
                self.params[f"dec.{layer}.self_attn.q_proj.weight"].data[:, sl] += \
                    c.anchor_contrast * np.outer(g, w)

    def _lid_prior(self, tokens: np.ndarray, layer: int) -> np.ndarray | None:
        """Fixed additive self-attention score prior toward LID-token key
        positions for the anchored heads of decoder layers above the first."""
        c = self.config
        if layer == 0 or not c.anchored_heads:
            return None
        zh, en = self.vocab.omega_ids
        is_lid = (tokens == zh) | (tokens == en)
        if not is_lid.any():
            return None
        batch, n_len = tokens.shape
        prior = np.zeros((batch, c.heads, 1, n_len))
        col = c.anchor_strength * is_lid.astype(np.float64)
        for head in c.anchored_head_ids:
            prior[:, head, 0, :] = col
        return prior

    def _add_ln(self, prefix: str) -> None:
        w = self.config.width
        self._add(prefix + ".gain", np.ones(w))
        self._add(prefix + ".bias", np.zeros(w))

    # -- adapters -------------------------------------------------------------

    def init_adapters(self, seed: int = 1) -> AdapterSummary:
        """Insert zero-initialised adapters; the network function is unchanged."""
        if self.has_adapters:
            raise DataError("adapters already initialised")
        rng = np.random.default_rng(seed)
        c = self.config
        w, b = c.width, c.bottleneck
        for side, n_layers in (("enc", c.enc_layers), ("dec", c.dec_layers)):
            for i in range(n_layers):
                for tag in ("attn_adapter", "ffn_adapter"):
                    p = f"{side}.{i}.{tag}."
                    self._add(p + "down.weight", rng.normal(0.0, 0.02, (w, b)))
                    self._add(p + "down.bias", np.zeros(b))
                    self._add(p + "up.weight", np.zeros((b, w)))
                    self._add(p + "up.bias", np.zeros(w))
        self.has_adapters = True
        return self.adapter_summary()

    def adapter_summary(self) -> AdapterSummary:
        adapter = sum(p.data.size for n, p in self.params.items() if is_adapter_param(n))
        backbone = sum(p.data.size for n, p in self.params.items() if not is_adapter_param(n))
        return AdapterSummary(adapter_count=adapter, backbone_count=backbone)

    def freeze_backbone(self) -> None:
        for name, p in self.params.items():
            if not is_adapter_param(name):
                p.freeze()

    def adapter_params(self, side: str | None = None) -> dict[str, Parameter]:
        out = {}
        for name, p in self.params.items():
            if not is_adapter_param(name):
                continue
            if side is not None and not name.startswith(side + "."):
                continue
            out[name] = p
        return out

    def trainable_params(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.params.items() if p.trainable}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise DataError(f"state is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise DataError(f"state shape mismatch for {name!r}")
            p.data = np.array(state[name], dtype=np.float64)

    # -- forward ----------------------------------------------------------------

    def _p(self, name: str) -> Parameter:
        return self.params[name]

    def _adapter(self, x: Tensor, prefix: str) -> Tensor:
        return adapter_apply(x, self._p(prefix + "down.weight"),
                             self._p(prefix + "down.bias"),
                             self._p(prefix + "up.weight"),
                             self._p(prefix + "up.bias"))

    def _split_heads(self, t: Tensor, length: int, batch: int) -> Tensor:
        c = self.config
        return t.reshape(batch, length, c.heads, c.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, t: Tensor, length: int, batch: int) -> Tensor:
        c = self.config
        return t.transpose(0, 2, 1, 3).reshape(batch, length, c.width)

    def _attend(self, x: Tensor, kv: Tensor, prefix: str, batch: int,
                causal: bool, extra_mask=None) -> tuple[Tensor, Tensor]:
        """One multi-head attention sub-layer; returns (output, maps)."""
        n_q = x.shape[1]
        n_k = kv.shape[1]
        q = self._split_heads(x @ self._p(prefix + ".q_proj.weight") + self._p(prefix + ".q_proj.bias"), n_q, batch)
        k = self._split_heads(kv @ self._p(prefix + ".k_proj.weight") + self._p(prefix + ".k_proj.bias"), n_k, batch)
        v = self._split_heads(kv @ self._p(prefix + ".v_proj.weight") + self._p(prefix + ".v_proj.bias"), n_k, batch)
        maps = attention_map(q, k, causal=causal, extra_mask=extra_mask)
        ctx = self._merge_heads(maps @ v, n_q, batch)
        out = ctx @ self._p(prefix + ".out_proj.weight") + self._p(prefix + ".out_proj.bias")
        return out, maps

    def forward(self, frames, tokens, frame_mask=None,
                enc_adapters: bool = True, dec_adapters: bool = True) -> ForwardOut:
        """Teacher-forced pass over a batch.

        frames: (B, T, feat_dim) float array, zero-padded; `frame_mask` (B, T)
        marks real frames. tokens: (B, N) int array, <blnk>-padded.
        """
        c = self.config
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        batch, t_len, feat = frames.shape
        n_len = tokens.shape[1]
        if feat != c.feat_dim:
            raise DataError(f"feature dimension {feat} does not match config {c.feat_dim}")
        if t_len > c.max_len or n_len > c.max_len:
            raise DataError("sequence too long for the configured maximum length")
        if tokens.shape[0] != batch:
            raise DataError("frames and tokens disagree on batch size")

        col_mask = None
        if frame_mask is not None:
            fm = np.asarray(frame_mask, dtype=bool)
            col_mask = np.where(fm, 0.0, -np.inf).reshape(batch, 1, 1, t_len)

        use_enc_ad = enc_adapters and self.has_adapters
        use_dec_ad = dec_adapters and self.has_adapters

        windowed = _stack_frame_window(frames)
        x = Tensor(windowed) @ self._p("enc.in_proj.weight") + self._p("enc.in_proj.bias")
        x = x + embedding(self._p("enc.pos.weight"), np.arange(t_len))
        for i in range(c.enc_layers):
            p = f"enc.{i}."
            h = layer_norm(x, self._p(p + "ln1.gain"), self._p(p + "ln1.bias"))
            attn_out, _ = self._attend(h, h, p + "attn", batch, causal=False,
                                       extra_mask=col_mask)
            x = x + attn_out
            if use_enc_ad:
                x = self._adapter(x, p + "attn_adapter.")
            h = layer_norm(x, self._p(p + "ln2.gain"), self._p(p + "ln2.bias"))
            f = gelu(h @ self._p(p + "ffn.fc1.weight") + self._p(p + "ffn.fc1.bias"))
            x = x + (f @ self._p(p + "ffn.fc2.weight") + self._p(p + "ffn.fc2.bias"))
            if use_enc_ad:
                x = self._adapter(x, p + "ffn_adapter.")
        memory = layer_norm(x, self._p("enc.ln_out.gain"), self._p("enc.ln_out.bias"))

        y = embedding(self._p("dec.embed.weight"), tokens)
        y = y + embedding(self._p("dec.pos.weight"), np.arange(n_len))
        attn_maps: list[Tensor] = []
        for i in range(c.dec_layers):
            p = f"dec.{i}."
            h = layer_norm(y, self._p(p + "ln1.gain"), self._p(p + "ln1.bias"))
            attn_out, maps = self._attend(h, h, p + "self_attn", batch, causal=True,
                                          extra_mask=self._lid_prior(tokens, i))
            attn_maps.append(maps)
            y = y + attn_out
            h = layer_norm(y, self._p(p + "ln2.gain"), self._p(p + "ln2.bias"))
            cross_out, _ = self._attend(h, memory, p + "cross_attn", batch,
                                        causal=False, extra_mask=col_mask)
            y = y + cross_out
            if use_dec_ad:
                y = self._adapter(y, p + "attn_adapter.")
            h = layer_norm(y, self._p(p + "ln3.gain"), self._p(p + "ln3.bias"))
            f = gelu(h @ self._p(p + "ffn.fc1.weight") + self._p(p + "ffn.fc1.bias"))
            y = y + (f @ self._p(p + "ffn.fc2.weight") + self._p(p + "ffn.fc2.bias"))
            if use_dec_ad:
                y = self._adapter(y, p + "ffn_adapter.")
        y = layer_norm(y, self._p("dec.ln_out.gain"), self._p("dec.ln_out.bias"))
        proj = y @ self._p("dec.out_proj.weight") + self._p("dec.out_proj.bias")

        logits = shift_rows(proj, axis=1)
        next_logits = proj[:, n_len - 1]
        return ForwardOut(logits=logits, next_logits=next_logits, attention=attn_maps)

    # -- decoding -----------------------------------------------------------------

    def greedy_decode(self, frames, frame_mask, prompt_ids: list[int],
                      max_new: int | None = None) -> list[list[int]]:
        """Greedy decoding from a shared prompt; returns content token lists
        (prompt and end marker stripped)."""
        eot = self.vocab.id("<eot>")
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        batch = frames.shape[0]
        prompt_len = len(prompt_ids)
        limit = self.config.max_len - prompt_len
        if max_new is not None:
            limit = min(limit, max_new)
        toks = np.tile(np.asarray(prompt_ids, dtype=np.int64), (batch, 1))
        done = np.zeros(batch, dtype=bool)
        with no_grad():
            for _ in range(limit):
                out = self.forward(frames, toks, frame_mask)
                nxt = out.next_logits.data.argmax(axis=-1)
                nxt = np.where(done, eot, nxt)
                toks = np.concatenate([toks, nxt[:, None]], axis=1)
                done |= nxt == eot
                if done.all():
                    break
        results = []
        for row in toks:
            content = []
            for tok in row[prompt_len:]:
                if tok == eot:
                    break
                content.append(int(tok))
            results.append(content)
        return results


def _stack_frame_window(frames: np.ndarray) -> np.ndarray:
    """(B, T, F) -> (B, T, 3F): previous, current, next frame per position,
    edge-padded with zeros."""
    b, t, f = frames.shape
    out = np.zeros((b, t, 3 * f))
    out[:, :, f:2 * f] = frames
    out[:, 1:, :f] = frames[:, :-1]
    out[:, :-1, 2 * f:] = frames[:, 1:]
    return out


def extract_attention(out: ForwardOut, batch_index: int = 0,
                      n: int | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Per-(layer, head) decoder self-attention maps for one sequence,
    trimmed to its true length and detached from the graph."""
    maps: dict[tuple[int, int], np.ndarray] = {}
    for layer, tensor in enumerate(out.attention):
        data = tensor.data[batch_index]
        heads = data.shape[0]
        length = data.shape[1] if n is None else n
        for h in range(heads):
            maps[(layer, h)] = data[h, :length, :length].copy()
    return maps
