"""Toy multimodal decoder with task-token taps.

Image patches are embedded by a frozen linear stub and prefixed to the text.
The final hidden state at each task-token position goes through one shared
projection MLP; nutrition tokens are routed to one of ten regression heads
(five fields × dish/ingredient level) and segmentation tokens prompt the mask
decoder, one token at a time.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .datamodel import NUTRITION_FIELDS, MaskImage, TaskToken
from .io import atomic_write_bytes
from .tokenizer import Tokenizer

CHECKPOINT_FORMAT = "nutriseg-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    image_size: int = 64
    patch_size: int = 8
    max_text_len: int = 384
    proj_dims: tuple[int, ...] = (256, 256, 256)
    head_dims: tuple[int, ...] = (256, 1)
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    mask_decode_dim: int = 64
    pixel_dim: int = 32
    # token embeddings and the output layer are trained along with the task
    # modules; the random toy base has no pretrained vocabulary to keep
    train_embeddings: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.proj_dims[0] != self.d_model:
            raise ValueError("proj_dims must start at d_model")
        if self.head_dims[-1] != 1:
            raise ValueError("regression heads end in one output")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["proj_dims"], d["head_dims"] = list(self.proj_dims), list(self.head_dims)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["proj_dims"], d["head_dims"] = tuple(d["proj_dims"]), tuple(d["head_dims"])
        return cls(**d)


def _mlp(dims: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class LoRALinear(nn.Module):
    """``base(x) + (alpha/r) · B A dropout(x)`` with A random and B zero at init."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise ValueError(f"LoRA rank must be in [1, {min(base.in_features, base.out_features)}], got {rank}")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (self.dropout(x) @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.base.in_features, self.base.out_features, bias=self.base.bias is not None)
        out = out.to(self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * (self.lora_B @ self.lora_A))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        out.requires_grad_(False)
        return out


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q, self.k, self.v, self.o = (nn.Linear(d, d) for _ in range(4))
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor, causal: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.ln1(x)
        split = lambda t: t.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)
        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // self.n_heads)
        att = att.masked_fill(~causal[:T, :T], float("-inf")).softmax(-1)
        x = x + self.o((att @ v).transpose(1, 2).reshape(B, T, D))
        return x + self.mlp(self.ln2(x))


class CrossAttentionLayer(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.ln_q = nn.LayerNorm(c)
        self.q, self.k, self.v, self.o = (nn.Linear(c, c) for _ in range(4))
        self.ln_mlp = nn.LayerNorm(c)
        self.mlp = nn.Sequential(nn.Linear(c, 2 * c), nn.GELU(), nn.Linear(2 * c, c))

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        # query [n, c], memory [n, P, c]
        h = self.ln_q(query)
        att = torch.einsum("nc,npc->np", self.q(h), self.k(memory)) / math.sqrt(query.shape[-1])
        query = query + self.o(torch.einsum("np,npc->nc", att.softmax(-1), self.v(memory)))
        return query + self.mlp(self.ln_mlp(query))


class MaskDecoder(nn.Module):
    """Prompt embedding × visual patch features -> per-pixel mask logits.

    Two cross-attention layers refine the prompt over the patch features; an
    MLP hypernetwork turns the refined prompt into a per-pixel linear readout
    over upsampled patch features concatenated with the raw pixel colours.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, p, e = cfg.mask_decode_dim, cfg.patch_size, 8
        self.grid = cfg.image_size // p
        self.patch = p
        self.prompt_in = nn.Linear(cfg.proj_dims[-1], c)
        self.memory_in = nn.Linear(cfg.d_model, c)
        self.layers = nn.ModuleList(CrossAttentionLayer(c) for _ in range(2))
        self.upsample = nn.Linear(cfg.d_model, p * p * e)
        self.pixel_mlp = nn.Sequential(nn.Linear(e + 3, 64), nn.GELU(), nn.Linear(64, cfg.pixel_dim))
        self.hyper = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, cfg.pixel_dim + 1))

    def forward(self, prompts: torch.Tensor, visual: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """prompts [n, proj_out], visual [n, P, d_model], pixels [n, H, W, 3] -> logits [n, H, W]."""
        n, P, _ = visual.shape
        q = self.prompt_in(prompts)
        mem = self.memory_in(visual)
        for layer in self.layers:
            q = layer(q, mem)
        g, p = self.grid, self.patch
        pix = self.upsample(visual).view(n, g, g, p, p, -1).permute(0, 1, 3, 2, 4, 5).reshape(n, g * p, g * p, -1)
        pix = self.pixel_mlp(torch.cat([pix, pixels.to(pix.dtype)], dim=-1))
        w = self.hyper(q)
        return torch.einsum("nhwk,nk->nhw", pix, w[:, :-1]) + w[:, -1, None, None]


def head_key(tok: TaskToken) -> str:
    return ("dish_" if tok.kind == "nutrition_dish" else "ing_") + tok.field


HEAD_KEYS = tuple(f"{lvl}_{f}" for lvl in ("dish", "ing") for f in NUTRITION_FIELDS)
# typical magnitudes (g or kcal); each head's output bias starts at log1p of these
HEAD_PRIORS = {
    "dish_mass": 300.0, "dish_cal": 400.0, "dish_carb": 40.0, "dish_fat": 15.0, "dish_pro": 25.0,
    "ing_mass": 60.0, "ing_cal": 80.0, "ing_carb": 8.0, "ing_fat": 3.0, "ing_pro": 5.0,
}


@dataclass
class ModelOutput:
    logits: torch.Tensor
    task_embeddings: dict[int, torch.Tensor] = field(default_factory=dict)
    nutrition_predictions: dict[TaskToken, float] = field(default_factory=dict)
    mask_predictions: dict[TaskToken, torch.Tensor] = field(default_factory=dict)


class ToyLMM(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d_model, cfg.patch_size
        self.task_offset = tokenizer.task_offset if tokenizer is not None else cfg.vocab_size
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.visual_pos = nn.Parameter(torch.zeros(cfg.n_patches, d))
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.text_pos = nn.Parameter(torch.zeros(cfg.max_text_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        # task modules keep PyTorch's default init (seeded); the small
        # transformer-style init below starves the mask decoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.proj = _mlp(cfg.proj_dims)
            self.heads = nn.ModuleDict({k: _mlp((cfg.proj_dims[-1], *cfg.head_dims)) for k in HEAD_KEYS})
            self.mask_decoder = MaskDecoder(cfg)
        total = cfg.n_patches + cfg.max_text_len
        self.register_buffer("causal", torch.ones(total, total, dtype=torch.bool).tril(), persistent=False)
        self._init_weights()
        self.freeze_base()

    def _init_weights(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.init_seed)
        with torch.no_grad():
            for part in (self.tok_embed, self.blocks, self.ln_f, self.lm_head):
                for mod in part.modules():
                    if isinstance(mod, nn.LayerNorm):
                        mod.weight.fill_(1.0)
                        mod.bias.zero_()
                    elif isinstance(mod, (nn.Linear, nn.Embedding)):
                        nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04, generator=g)
                        if getattr(mod, "bias", None) is not None:
                            mod.bias.zero_()
            for prm in (self.visual_pos, self.text_pos):
                nn.init.trunc_normal_(prm, std=0.02, a=-0.04, b=0.04, generator=g)
            fan_in = 3 * self.cfg.patch_size**2
            self.patch_embed.weight.normal_(0, 1.0 / math.sqrt(fan_in), generator=g)
            self.patch_embed.bias.zero_()
            for key, head in self.heads.items():
                head[-1].bias.fill_(math.log1p(HEAD_PRIORS[key]))

    # parameters never touched by training
    BASE_PREFIXES = ("patch_embed.", "visual_pos", "text_pos", "blocks.", "ln_f.")

    def freeze_base(self) -> None:
        for name, prm in self.named_parameters():
            frozen = name.startswith(self.BASE_PREFIXES) and "lora_" not in name
            if not self.cfg.train_embeddings and name.startswith(("tok_embed.", "lm_head.")):
                frozen = True
            prm.requires_grad_(not frozen)

    def base_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    # -- encoders -------------------------------------------------------------

    def encode_image(self, images: torch.Tensor, with_position: bool = True) -> torch.Tensor:
        """[B, H, W, 3] (or [H, W, 3]) -> [B, n_patches, d_model]."""
        single = images.ndim == 3
        if single:
            images = images[None]
        B, H, W, C = images.shape
        s, p = self.cfg.image_size, self.cfg.patch_size
        if (H, W, C) != (s, s, 3):
            raise ValueError(f"expected images of shape ({s}, {s}, 3), got {tuple(images.shape[1:])}")
        g = s // p
        patches = images.reshape(B, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(B, g * g, p * p * 3)
        out = self.patch_embed(patches.to(self.patch_embed.weight.dtype))
        if with_position:
            out = out + self.visual_pos
        return out[0] if single else out

    def hidden_states(self, visual: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Final hidden states of the text positions, [B, T, d]."""
        B, T = ids.shape
        if T > self.cfg.max_text_len:
            raise ValueError(f"text length {T} exceeds max_text_len {self.cfg.max_text_len}")
        x = torch.cat([visual, self.tok_embed(ids) + self.text_pos[:T]], dim=1)
        for blk in self.blocks:
            x = blk(x, self.causal)
        return self.ln_f(x[:, visual.shape[1] :])

    def forward(self, images: torch.Tensor, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (text logits [B,T,V], hidden [B,T,d], visual features [B,P,d])."""
        visual = self.encode_image(images)
        hidden = self.hidden_states(visual, ids)
        return self.lm_head(hidden), hidden, visual

    # -- task heads -------------------------------------------------------------

    def regress(self, embeddings: torch.Tensor, tokens: Sequence[TaskToken]) -> torch.Tensor:
        """Raw (log1p-space) head outputs, one per token."""
        if not tokens:
            return embeddings.new_zeros(0)
        out = embeddings.new_empty(len(tokens))
        for key in HEAD_KEYS:
            idx = [i for i, t in enumerate(tokens) if head_key(t) == key]
            if idx:
                out = out.index_put((torch.tensor(idx),), self.heads[key](embeddings[idx]).squeeze(-1))
        return out

    def decode_masks(self, embeddings: torch.Tensor, visual: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """Mask logits [n, H, W]; each prompt is decoded on its own image."""
        return self.mask_decoder(embeddings, visual, pixels)

    def task_outputs(
        self,
        hidden: torch.Tensor,
        visual: torch.Tensor,
        ids: torch.Tensor,
        positions: Sequence[tuple[int, int, TaskToken]],
        images: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[TaskToken], torch.Tensor, list[TaskToken]]:
        """(nutrition raw preds, their tokens, mask logits, their tokens) for (batch, pos, token) taps.

        ``images`` [B, H, W, 3] is needed whenever a segmentation token is tapped.
        """
        B, T, _ = hidden.shape
        for b, t, tok in positions:
            if not (0 <= b < B and 0 <= t < T):
                raise IndexError(f"task position {(b, t)} out of range for batch {B}×{T}")
            if int(ids[b, t]) < self.task_offset:
                raise ValueError(f"position {(b, t)} does not hold a task token ({tok})")
        nut = [(b, t, tok) for b, t, tok in positions if tok.is_nutrition]
        seg = [(b, t, tok) for b, t, tok in positions if not tok.is_nutrition]
        nut_pred = hidden.new_zeros(0)
        mask_logits = hidden.new_zeros(0, self.cfg.image_size, self.cfg.image_size)
        if nut:
            emb = self.proj(hidden[[b for b, _, _ in nut], [t for _, t, _ in nut]])
            nut_pred = self.regress(emb, [tok for _, _, tok in nut])
        if seg:
            bs = [b for b, _, _ in seg]
            emb = self.proj(hidden[bs, [t for _, t, _ in seg]])
            if images is None:
                raise ValueError("segmentation taps need the batch images")
            mask_logits = self.decode_masks(emb, visual[bs], images[bs])
        return nut_pred, [n[2] for n in nut], mask_logits, [s[2] for s in seg]

    def run(self, image: torch.Tensor, ids: Sequence[int], positions: Sequence[tuple[int, TaskToken]] = ()) -> ModelOutput:
        """Single-sample forward pass with all task outputs decoded."""
        ids_t = torch.as_tensor(list(ids), dtype=torch.long)[None]
        images = image[None] if image.ndim == 3 else image
        logits, hidden, visual = self(images, ids_t)
        pos3 = [(0, t, tok) for t, tok in positions]
        nut, nut_tok, mlog, seg_tok = self.task_outputs(hidden, visual, ids_t, pos3, images)
        out = ModelOutput(logits=logits[0])
        for t, _ in positions:
            out.task_embeddings[t] = self.proj(hidden[0, t])
        for tok, v in zip(nut_tok, nut):
            out.nutrition_predictions[tok] = float(torch.expm1(v.detach()))
        for tok, m in zip(seg_tok, mlog):
            out.mask_predictions[tok] = torch.sigmoid(m)
        return out


# -- LoRA ----------------------------------------------------------------------

ATTENTION_MAPS = ("q", "k", "v", "o")


def apply_lora(model: ToyLMM, rank: int | None = None, alpha: float | None = None, dropout: float | None = None) -> ToyLMM:
    cfg = model.cfg
    rank = cfg.lora_rank if rank is None else rank
    alpha = cfg.lora_alpha if alpha is None else alpha
    dropout = cfg.lora_dropout if dropout is None else dropout
    if rank < 1 or rank > cfg.d_model:
        raise ValueError(f"LoRA rank must be in [1, d_model={cfg.d_model}], got {rank}")
    g = torch.Generator().manual_seed(cfg.init_seed + 1)
    for blk in model.blocks:
        for name in ATTENTION_MAPS:
            lin = getattr(blk, name)
            if isinstance(lin, LoRALinear):
                raise ValueError("LoRA already applied")
            wrapped = LoRALinear(lin, rank, alpha, dropout)
            with torch.no_grad():
                bound = 1.0 / math.sqrt(lin.in_features)
                wrapped.lora_A.uniform_(-bound, bound, generator=g)
            setattr(blk, name, wrapped)
    return model


def merge_lora(model: ToyLMM) -> ToyLMM:
    for blk in model.blocks:
        for name in ATTENTION_MAPS:
            lin = getattr(blk, name)
            if isinstance(lin, LoRALinear):
                setattr(blk, name, lin.merged())
    return model


def has_lora(model: ToyLMM) -> bool:
    return any(isinstance(getattr(b, n), LoRALinear) for b in model.blocks for n in ATTENTION_MAPS)


def build_model(cfg: ModelConfig, tokenizer: Tokenizer, lora: bool = True) -> ToyLMM:
    if cfg.vocab_size != tokenizer.vocab_size:
        cfg = ModelConfig(**{**cfg.to_json(), "vocab_size": tokenizer.vocab_size, "proj_dims": cfg.proj_dims, "head_dims": cfg.head_dims})
    model = ToyLMM(cfg, tokenizer)
    if lora:
        apply_lora(model)
    return model


# -- generation ------------------------------------------------------------------

@dataclass
class Generation:
    ids: list[int]
    # (offset within ``ids``, token) for every task token emitted
    task_positions: list[tuple[int, TaskToken]]
    stopped: bool


@torch.no_grad()
def generate(
    model: ToyLMM,
    image: torch.Tensor,
    prompt_ids: Sequence[int],
    max_new_tokens: int,
    tokenizer: Tokenizer,
) -> Generation:
    """Greedy decoding until the stop token or the budget runs out."""
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    was_training = model.training
    model.eval()
    visual = model.encode_image(image[None] if image.ndim == 3 else image)
    seq = list(prompt_ids)
    out: list[int] = []
    stopped = False
    limit = model.cfg.max_text_len
    for _ in range(max_new_tokens):
        if len(seq) >= limit:
            break
        hidden = model.hidden_states(visual, torch.tensor([seq]))
        nxt = int(model.lm_head(hidden[0, -1]).argmax())
        if nxt == tokenizer.stop_id:
            stopped = True
            break
        seq.append(nxt)
        out.append(nxt)
    model.train(was_training)
    positions = [(i, tokenizer.task_token(t)) for i, t in enumerate(out) if tokenizer.is_task_id(t)]
    return Generation(out, positions, stopped)


# -- checkpoints -----------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, model: ToyLMM, tokenizer: Tokenizer, extra: dict[str, Any] | None = None) -> None:
    """One zip archive: metadata JSON plus one .npy per named parameter."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_json(),
        "tokenizer": tokenizer.to_json(),
        "lora": has_lora(model),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, tensor in sorted(model.state_dict().items()):
            arr = io.BytesIO()
            np.save(arr, tensor.detach().cpu().numpy(), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", arr.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ToyLMM, Tokenizer, dict[str, Any]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        tokenizer = Tokenizer.from_json(meta["tokenizer"])
        cfg = ModelConfig.from_json(meta["config"])
        model = build_model(cfg, tokenizer, lora=meta["lora"])
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                state[name[len("params/") : -len(".npy")]] = torch.from_numpy(np.load(io.BytesIO(zf.read(name))))
    model.load_state_dict(state)
    return model, tokenizer, meta.get("extra", {})


def mask_from_probs(prob: torch.Tensor, threshold: float = 0.5) -> MaskImage:
    return MaskImage((prob.detach().cpu().numpy() > threshold).astype(np.uint8))
