"""Run assembly behind the command-line tools: build, train, persist, sample, inspect."""

from __future__ import annotations

import csv
import dataclasses
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as config_mod
from .corpus import detokenize, ingest_corpus
from .denoiser import LearnedDenoiser, build_model
from .embedding import Vocabulary
from .evaluation import MetricsReport, SyntheticSource, marginal_tv, source_nll, token_frequencies, unigram_entropy
from .numerics import RngStream, integers
from .optim import AdamState
from .sampler import sample
from .training import TrainState, train_step
from .warp import WarpCdf, eval_cdf, importance_weight, pdf

_DATA_STREAM = 4 << 40
_SAMPLE_STREAM = 5 << 40
_SAMPLE_CHUNK = 256

METRICS_COLUMNS = ["step", "wall_seconds", "mean_weighted_ce", "t_p10", "t_p50", "t_p90"]
WARP_COLUMNS = ["t", "F_tilde", "F", "pdf", "weight"]


@dataclasses.dataclass
class Run:
    cfg: dict
    vocab: Vocabulary
    state: TrainState
    data_rng: RngStream
    source: Optional[SyntheticSource] = None
    corpus: Optional[np.ndarray] = None

    @property
    def tokenizer(self) -> Optional[str]:
        return self.cfg["data"].get("tokenizer")


def _load_data(cfg: dict):
    data = cfg["data"]
    if data["source"] == "corpus":
        windows, vocab = ingest_corpus(data["path"], data["tokenizer"], cfg["train"]["seq_len"])
        return vocab, None, windows
    if data["source"] == "markov":
        src = SyntheticSource("markov", transition=np.array(data["transition"]),
                              initial=None if "initial" not in data else np.array(data["initial"]))
    else:
        src = SyntheticSource("iid", probs=np.array(data["probs"]))
    return src.vocab, src, None


def new_run(cfg: dict) -> Run:
    vocab, source, corpus = _load_data(cfg)
    model, table = build_model(config_mod.denoiser_config(cfg, vocab.size), cfg["seed"],
                               cfg["model"]["embedding_init_scale"])
    tcfg = config_mod.train_config(cfg)
    warp = WarpCdf.identity(cfg["n_bins"], cfg["t_min"], cfg["t_max"], min_bin=cfg["warp"]["min_bin"],
                            ema_decay=cfg["warp"]["ema_decay"], optimizer=tcfg.adam)
    return Run(cfg, vocab, TrainState(model, table, warp), RngStream(cfg["seed"], _DATA_STREAM), source, corpus)


def next_batch(run: Run) -> np.ndarray:
    t = run.cfg["train"]
    if run.source is not None:
        return run.source.sample(run.data_rng, t["batch"], t["seq_len"])
    idx = integers(run.data_rng, run.corpus.shape[0], (t["batch"],))
    return run.corpus[idx]


# ---------------------------------------------------------------- persistence

def _adam_arrays(prefix: str, adam: AdamState, names) -> dict:
    out = {}
    for n in names:
        if n in adam.m:
            out[f"{prefix}.m.{n}"] = adam.m[n]
            out[f"{prefix}.v.{n}"] = adam.v[n]
    return out


def _restore_adam(prefix: str, adam: AdamState, arrays: dict, names) -> None:
    for n in names:
        if f"{prefix}.m.{n}" in arrays:
            adam.m[n] = arrays[f"{prefix}.m.{n}"].copy()
            adam.v[n] = arrays[f"{prefix}.v.{n}"].copy()


def to_checkpoint(run: Run):
    st = run.state
    arrays = {f"model.{k}": v.detach().numpy() for k, v in st.model.state_dict().items()}
    arrays["embedding.raw"] = st.table.raw.detach().numpy()
    arrays.update(_adam_arrays("adam", st.adam, st.named_parameters()))
    w = st.warp
    arrays.update({
        "warp.input_logits": w.input_logits, "warp.output_logits": w.output_logits,
        "warp.ema_input_logits": w.ema_input_logits, "warp.ema_output_logits": w.ema_output_logits,
    })
    arrays.update(_adam_arrays("warp.adam", w.adam, w.params()))
    meta = {
        "config": run.cfg,
        "vocab": run.vocab.tokens,
        "step": st.step,
        "adam_step": st.adam.step,
        "warp_adam_step": w.adam.step,
        "rng": {"data": dataclasses.asdict(run.data_rng)},
    }
    return meta, arrays


def from_checkpoint(meta: dict, arrays: dict) -> Run:
    run = new_run(config_mod.resolve(meta["config"]))
    if run.vocab.tokens != meta["vocab"]:
        raise ckpt.CheckpointError("data vocabulary differs from the one stored in the checkpoint")
    st = run.state
    with torch.no_grad():
        sd = st.model.state_dict()
        for k in sd:
            sd[k].copy_(torch.from_numpy(arrays[f"model.{k}"]))
        st.table.raw.copy_(torch.from_numpy(arrays["embedding.raw"]))
    st.step = meta["step"]
    st.adam.step = meta["adam_step"]
    _restore_adam("adam", st.adam, arrays, st.named_parameters())
    w = st.warp
    for k in ("input_logits", "output_logits", "ema_input_logits", "ema_output_logits"):
        setattr(w, k, arrays[f"warp.{k}"].copy())
    w.adam.step = meta["warp_adam_step"]
    _restore_adam("warp.adam", w.adam, arrays, w.params())
    run.data_rng = RngStream(**meta["rng"]["data"])
    return run


def save_run(run: Run, path) -> None:
    meta, arrays = to_checkpoint(run)
    ckpt.save(path, meta, arrays)


def load_run(path) -> Run:
    meta, arrays = ckpt.load(path)
    return from_checkpoint(meta, arrays)


# ---------------------------------------------------------------- commands

def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, int) else str(x)


def _prepare_metrics(path: Path, keep_through: int) -> None:
    """Start a fresh metrics file, or drop rows past the resume point."""
    rows = []
    if path.exists():
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if r and int(r[0]) <= keep_through]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(rows)


def train(run: Run, out_dir, log: Callable[[str], None] = lambda s: None) -> Path:
    """Train until ``train.steps``; checkpoint every ``checkpoint_every`` steps and at the end."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    _prepare_metrics(metrics, run.state.step)
    tcfg = config_mod.train_config(run.cfg)
    every = run.cfg["train"]["checkpoint_every"]
    start = time.perf_counter()
    last = None
    with metrics.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while run.state.step < tcfg.steps:
            stats = train_step(run.state, next_batch(run), tcfg)
            q = stats.t_quantiles()
            writer.writerow([stats.step, _fmt(time.perf_counter() - start), _fmt(stats.mean_weighted_ce)]
                            + [_fmt(v) for v in q])
            fh.flush()
            if stats.step % every == 0 or stats.step == tcfg.steps:
                last = out / f"step-{stats.step:08d}.ckpt"
                save_run(run, last)
                log(f"step {stats.step}: weighted CE {stats.mean_weighted_ce:.4f}, saved {last.name}")
    if last is None:
        last = out / f"step-{run.state.step:08d}.ckpt"
        save_run(run, last)
    return last


def generate(run: Run, n_samples: int, seed: int, **overrides):
    """Sample ``n_samples`` sequences of the training length; returns tokens and the step grid."""
    scfg = config_mod.sampler_config(run.cfg, **overrides)
    den = LearnedDenoiser(run.state.model)
    emb = run.state.table.numpy()
    rng = RngStream(seed, _SAMPLE_STREAM)
    length = run.cfg["train"]["seq_len"]
    chunks, grid = [], None
    for lo in range(0, n_samples, _SAMPLE_CHUNK):
        b = min(_SAMPLE_CHUNK, n_samples - lo)
        res = sample(den, emb, scfg, rng, batch=b, length=length, warp=run.state.warp)
        chunks.append(res.tokens)
        grid = res.trajectory.timesteps
    return np.concatenate(chunks, axis=0), grid


def _escape(line: str) -> str:
    return line.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def format_samples(run: Run, tokens: np.ndarray) -> str:
    tok = run.tokenizer or "whitespace"
    return "".join(_escape(detokenize(run.vocab.decode(row), tok)) + "\n" for row in tokens)


def evaluate(run: Run, tokens: np.ndarray) -> MetricsReport:
    if run.source is not None:
        truth = run.source.marginal(tokens.shape[1])
        nll = source_nll(run.source, tokens)
    else:
        truth = token_frequencies(run.corpus, run.vocab.size)
        nll = None
    return MetricsReport(
        unigram_entropy_nats=unigram_entropy(tokens),
        tv_to_truth=marginal_tv(tokens, truth),
        nll_truth=nll,
        n_samples=int(tokens.shape[0]),
    )


def warp_table(run: Run, n: int = 1000) -> np.ndarray:
    """Columns ``t, F_tilde, F, pdf, weight`` of the sampling (EMA) warp on ``n`` points."""
    view = run.state.warp.view()
    tp = np.linspace(0.0, 1.0, n)
    t = view.t_min + (view.t_max - view.t_min) * tp
    return np.column_stack([t, eval_cdf(view, tp, normalized=False), eval_cdf(view, tp),
                            pdf(view, tp), importance_weight(view, tp)])
