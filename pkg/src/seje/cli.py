"""Command-line surface for running the pipeline: data generation,
preprocessing, training, evaluation, retrieval, and the ablation grid.

Conventions: exit code 0 on success, 2 on configuration/usage errors, 3 on
training divergence. Every command writes a manifest.json into its --out
directory recording the resolved settings, seeds, and input/output hashes, so
a run is reproducible from the manifest alone. Flag values override --config
file entries (flat key=value lines), which override built-in defaults; the
SEJE_SEED environment variable supplies the seed when no other source does.
"""

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .common import ConfigError, DivergenceError, file_sha256, write_jsonl
from .corpus import Corpus, GeneratorSpec, generate_synthetic_corpus, load_corpus, \
    save_corpus, split
from .encoders import JointConfig, JointModel, load_joint_model
from .evalkit import evaluate_protocol
from .image_sem import ClassifierConfig
from .pipeline import ARTIFACT_FILES, PreprocessConfig, load_artifacts, run_preprocess, \
    save_artifacts
from .term_extract import TaggerConfig
from .term_rate import RaterConfig
from .text_sem import SentenceEncoderConfig
from .trainer import (ABLATION_ROWS, TrainConfig, build_features, compute_embeddings,
                      format_ablation_table, run_ablation, train)

RATER_NAMES = {"tfidf": "tfidf", "textrank": "textrank",
               "embedding": "embedding_similarity"}

_SWITCH_FLAGS = ("use_batch_all", "use_hard_negatives_single_constraint", "use_CA",
                 "use_CA_original_labels", "use_DA", "use_key_terms",
                 "use_category_embedding", "eq4_as_printed")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path):
    """Flat key=value configuration file; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(raw.strip())
    return values


def resolve_settings(args, defaults):
    """defaults <- config file <- explicitly passed flags, then seed fallback."""
    settings = dict(defaults)
    explicit = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in settings:
                raise ConfigError(f"unknown config key {key!r}")
            settings[key] = value
    settings.update(explicit)
    if settings.get("seed") is None:
        env = os.environ.get("SEJE_SEED")
        settings["seed"] = int(env) if env else 0
    return SimpleNamespace(**settings)


def write_manifest(out_dir, command, settings, inputs, outputs):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "manifest_version": 1,
        "package_version": __version__,
        "command": command,
        "settings": {k: v for k, v in sorted(vars(settings).items())},
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_splits(corpus, artifact_dir):
    path = Path(artifact_dir) / "splits.json"
    if not path.exists():
        raise ConfigError(f"missing split assignment file: {path}")
    assignment = json.loads(path.read_text())
    by_id = {p.recipe.id: p for p in corpus.pairs}
    out = {}
    for name in ("train", "val", "test"):
        ids = assignment[name]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"{path}: ids not present in corpus: {missing[:3]}")
        out[name] = Corpus(pairs=[by_id[i] for i in ids], categories=corpus.categories,
                           signatures=corpus.signatures,
                           function_words=corpus.function_words)
    return out["train"], out["val"], out["test"]


# ----------------------------------------------------------------- commands

GEN_DEFAULTS = dict(vocab_size=120, seed=None, ingredient_pool=40, utensil_pool=10,
                    action_pool=10, resolution=32)


def cmd_gen_data(args):
    s = resolve_settings(args, {**GEN_DEFAULTS,
                                "categories": None, "per_category": None, "out": None})
    spec = GeneratorSpec(num_categories=s.categories, pairs_per_category=s.per_category,
                         vocab_size=s.vocab_size, seed=s.seed,
                         ingredient_pool_size=s.ingredient_pool,
                         utensil_pool_size=s.utensil_pool,
                         action_pool_size=s.action_pool, resolution=s.resolution)
    corpus = generate_synthetic_corpus(spec)
    out_dir = Path(s.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.jsonl"
    save_corpus(corpus, corpus_path)
    write_manifest(out_dir, "gen-data", s, [], [corpus_path])
    print(f"wrote {len(corpus)} pairs across {corpus.categories.count} categories "
          f"to {corpus_path}")
    return 0


PREPROCESS_DEFAULTS = dict(seed=None, rater="tfidf", filter_threshold=None,
                           train_frac=0.7, val_frac=0.1, split_seed=0,
                           d_w=32, d_s=64, cbow_epochs=8, tagger_epochs=10,
                           sentence_epochs=20, classifier_epochs=8)


def cmd_preprocess(args):
    s = resolve_settings(args, {**PREPROCESS_DEFAULTS, "corpus": None, "out": None})
    corpus = load_corpus(s.corpus)
    train_c, val_c, test_c = split(corpus, s.train_frac, s.val_frac, seed=s.split_seed)
    config = PreprocessConfig(
        seed=s.seed, d_w=s.d_w, cbow_epochs=s.cbow_epochs,
        tagger=TaggerConfig(epochs=s.tagger_epochs, seed=s.seed),
        sentence=SentenceEncoderConfig(d_s=s.d_s, epochs=s.sentence_epochs, seed=s.seed),
        classifier=ClassifierConfig(epochs=s.classifier_epochs, seed=s.seed,
                                    resolution=corpus.pairs[0].image.pixels.shape[0]),
        rater=RaterConfig(algorithm=RATER_NAMES[s.rater],
                          filter_threshold=s.filter_threshold))
    artifacts = run_preprocess(corpus, train_c, val_c, config)
    out_dir = Path(s.out)
    save_artifacts(artifacts, out_dir)
    splits_path = out_dir / "splits.json"
    splits_path.write_text(json.dumps({
        "train": [p.recipe.id for p in train_c.pairs],
        "val": [p.recipe.id for p in val_c.pairs],
        "test": [p.recipe.id for p in test_c.pairs],
        "train_frac": s.train_frac, "val_frac": s.val_frac, "split_seed": s.split_seed,
    }, indent=2) + "\n")
    outputs = [out_dir / name for name in ARTIFACT_FILES] + [splits_path]
    write_manifest(out_dir, "preprocess", s, [Path(s.corpus)], outputs)
    acc = artifacts.classifier.validation_accuracy
    print(f"preprocessed {len(corpus)} pairs; classifier val accuracy "
          f"{'n/a' if acc is None else round(acc, 4)}; "
          f"{len(artifacts.entity_vocabulary)} true entities; artifacts in {out_dir}")
    return 0


TRAIN_DEFAULTS = dict(seed=None, epochs=20, batch_size=16, lr=1e-3,
                      d=64, lstm_hidden=64, disc_hidden=64, image_channels=8,
                      lambda1=0.005, lambda2=0.005, gamma=16.0, margin=0.0,
                      lambda_D=10.0, batch_all_margin=0.3, disc_steps=1,
                      resume=None,
                      use_batch_all=False, use_hard_negatives_single_constraint=False,
                      use_CA=True, use_CA_original_labels=False, use_DA=True,
                      use_key_terms=True, use_category_embedding=True,
                      eq4_as_printed=False)


def _train_configs(s, corpus, artifacts):
    from .losses import LossConfig
    loss = LossConfig(lambda1=s.lambda1, lambda2=s.lambda2, gamma=s.gamma,
                      margin=s.margin, lambda_D=s.lambda_D,
                      eq4_as_printed=s.eq4_as_printed)
    tcfg = TrainConfig(epochs=s.epochs, batch_size=s.batch_size, learning_rate=s.lr,
                       seed=s.seed, disc_steps=s.disc_steps,
                       use_batch_all=s.use_batch_all,
                       use_hard_negatives_single_constraint=s.use_hard_negatives_single_constraint,
                       use_CA=s.use_CA, use_CA_original_labels=s.use_CA_original_labels,
                       use_DA=s.use_DA, use_key_terms=s.use_key_terms,
                       use_category_embedding=s.use_category_embedding,
                       batch_all_margin=s.batch_all_margin, loss=loss)
    jcfg = JointConfig(d=s.d, lstm_hidden=s.lstm_hidden, d_w=artifacts.word_table.dim,
                       d_s=artifacts.sentence_encoder.config.d_s,
                       image_resolution=corpus.pairs[0].image.pixels.shape[0],
                       image_channels=s.image_channels, disc_hidden=s.disc_hidden,
                       num_categories=corpus.categories.count + 1, seed=s.seed)
    return tcfg, jcfg


def cmd_train(args):
    s = resolve_settings(args, {**TRAIN_DEFAULTS, "corpus": None, "artifacts": None,
                                "out": None})
    corpus = load_corpus(s.corpus)
    artifacts = load_artifacts(s.artifacts)
    train_c, val_c, _ = _load_splits(corpus, s.artifacts)
    tcfg, jcfg = _train_configs(s, corpus, artifacts)
    out_dir = Path(s.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(train_c, val_c, artifacts, tcfg, jcfg, out_dir=out_dir,
                   resume_from=s.resume)
    outputs = [out_dir / "best_model.pt", out_dir / "train_state.pt",
               out_dir / "loss_trace.jsonl", out_dir / "val_history.jsonl"]
    inputs = [Path(s.corpus)] + [Path(s.artifacts) / n for n in ARTIFACT_FILES]
    write_manifest(out_dir, "train", s, inputs, outputs)
    print(f"trained {tcfg.epochs} epochs ({len(result.history)} steps); "
          f"best val image-to-recipe MedR {result.best_val_medr}; model in {out_dir}")
    return 0


EVAL_DEFAULTS = dict(seed=None, subset_size=None, trials=10, split="test",
                     checkpoint=None, corpus=None, artifacts=None, embeddings=None,
                     plot=False, out=None)


def _report_lines(reports):
    lines = []
    for direction, report in reports.items():
        rec = report.record()
        recalls = " ".join(f"R@{k} {rec[f'r@{k}_mean']:.1f}" for k in (1, 5, 10))
        lines.append(f"{direction}: MedR {rec['medr_mean']:.1f} "
                     f"(median-of-trials {rec['medr_median']:.1f}) {recalls}")
    return lines


def _plot_rank_histograms(reports, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = Path(out_dir) / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for direction, report in reports.items():
        for t, ranks in enumerate(getattr(report, "ranks_per_trial", [])):
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.hist(ranks, bins=min(50, report.subset_size))
            ax.set_xlabel("rank of true match")
            ax.set_ylabel("queries")
            ax.set_title(f"{direction} trial {t}")
            fig.tight_layout()
            path = plot_dir / f"{direction}_trial{t:02d}.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written


def cmd_eval(args):
    s = resolve_settings(args, EVAL_DEFAULTS)
    inputs = []
    if s.embeddings:
        with np.load(s.embeddings) as data:
            emb_r, emb_v = data["recipe"], data["image"]
        inputs.append(Path(s.embeddings))
    else:
        if not (s.checkpoint and s.corpus and s.artifacts):
            raise ConfigError("eval needs either --embeddings or all of "
                              "--checkpoint/--corpus/--artifacts")
        corpus = load_corpus(s.corpus)
        artifacts = load_artifacts(s.artifacts)
        splits = dict(zip(("train", "val", "test"), _load_splits(corpus, s.artifacts)))
        target = corpus if s.split == "all" else splits[s.split]
        model, payload = load_joint_model(s.checkpoint)
        tcfg = TrainConfig(**payload.get("train_config", {})) \
            if payload.get("train_config") else TrainConfig()
        features = build_features(target, artifacts, tcfg)
        emb_r, emb_v = compute_embeddings(model, features)
        inputs += [Path(s.checkpoint), Path(s.corpus)]

    subset = s.subset_size or min(1000, emb_r.shape[0])
    started = time.perf_counter()
    reports = evaluate_protocol(emb_r, emb_v, subset_size=subset, trials=s.trials,
                                seed=s.seed, keep_ranks=s.plot)
    elapsed = time.perf_counter() - started
    per_query = elapsed / max(1, 2 * subset * s.trials)

    for line in _report_lines(reports):
        print(line)
    print(f"wall-clock {elapsed:.2f}s total, {per_query * 1e3:.3f} ms per query")

    if s.out:
        out_dir = Path(s.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "retrieval_report.jsonl"
        write_jsonl(report_path, [r.record() for r in reports.values()])
        outputs = [report_path]
        if s.plot:
            outputs += _plot_rank_histograms(reports, out_dir)
        write_manifest(out_dir, "eval", s, inputs, outputs)
    return 0


RETRIEVE_DEFAULTS = dict(seed=None, top_k=5, split="test", query_image=None,
                         query_recipe=None, out=None)


def cmd_retrieve(args):
    s = resolve_settings(args, {**RETRIEVE_DEFAULTS, "checkpoint": None,
                                "corpus": None, "artifacts": None})
    if bool(s.query_image) == bool(s.query_recipe):
        raise ConfigError("pass exactly one of --query-image or --query-recipe")
    corpus = load_corpus(s.corpus)
    artifacts = load_artifacts(s.artifacts)
    splits = dict(zip(("train", "val", "test"), _load_splits(corpus, s.artifacts)))
    target = corpus if s.split == "all" else splits[s.split]
    model, payload = load_joint_model(s.checkpoint)
    tcfg = TrainConfig(**payload.get("train_config", {})) \
        if payload.get("train_config") else TrainConfig()
    features = build_features(target, artifacts, tcfg)
    emb_r, emb_v = compute_embeddings(model, features)

    ids = [p.recipe.id for p in target.pairs]
    image_ids = [p.image.id for p in target.pairs]
    if s.query_image:
        if s.query_image not in image_ids:
            raise ConfigError(f"image id {s.query_image!r} not in the {s.split} split")
        qi = image_ids.index(s.query_image)
        query, candidates, cand_ids = emb_v[qi], emb_r, ids
        direction = "image->recipe"
    else:
        if s.query_recipe not in ids:
            raise ConfigError(f"recipe id {s.query_recipe!r} not in the {s.split} split")
        qi = ids.index(s.query_recipe)
        query, candidates, cand_ids = emb_r[qi], emb_v, image_ids
        direction = "recipe->image"

    distances = np.sqrt(((candidates - query[None, :]) ** 2).sum(axis=1))
    order = np.argsort(distances, kind="stable")[:s.top_k]
    lines = [f"top {s.top_k} {direction} results for {s.query_image or s.query_recipe} "
             f"(true category {target.pairs[qi].recipe.category}):"]
    for rank_i, j in enumerate(order, start=1):
        lines.append(f"  {rank_i:>2}. {cand_ids[j]}  distance {distances[j]:.4f}  "
                     f"category {target.pairs[j].recipe.category}")
    listing = "\n".join(lines)
    print(listing)
    if s.out:
        out_dir = Path(s.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "retrieval_listing.txt"
        path.write_text(listing + "\n")
        write_manifest(out_dir, "retrieve", s,
                       [Path(s.checkpoint), Path(s.corpus)], [path])
    return 0


ABLATE_DEFAULTS = dict(seed=None, epochs=5, batch_size=16, lr=1e-3, d=64,
                       lstm_hidden=64, disc_hidden=64, image_channels=8,
                       subset_size=None, trials=1, rows=",".join(ABLATION_ROWS))


def cmd_ablate(args):
    s = resolve_settings(args, {**ABLATE_DEFAULTS, "corpus": None, "artifacts": None,
                                "out": None})
    corpus = load_corpus(s.corpus)
    artifacts = load_artifacts(s.artifacts)
    train_c, val_c, test_c = _load_splits(corpus, s.artifacts)
    base = TrainConfig(epochs=s.epochs, batch_size=s.batch_size, learning_rate=s.lr,
                       seed=s.seed)
    jcfg = JointConfig(d=s.d, lstm_hidden=s.lstm_hidden, d_w=artifacts.word_table.dim,
                       d_s=artifacts.sentence_encoder.config.d_s,
                       image_resolution=corpus.pairs[0].image.pixels.shape[0],
                       image_channels=s.image_channels, disc_hidden=s.disc_hidden,
                       num_categories=corpus.categories.count + 1, seed=s.seed)
    row_names = [r.strip() for r in s.rows.split(",") if r.strip()]
    rows = run_ablation(row_names, base, jcfg, train_c, val_c, test_c, artifacts,
                        subset_size=s.subset_size, trials=s.trials, eval_seed=s.seed)
    table = format_ablation_table(rows)
    print(table)
    out_dir = Path(s.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_path = out_dir / "ablation.jsonl"
    write_jsonl(rows_path, rows)
    table_path = out_dir / "ablation_table.txt"
    table_path.write_text(table + "\n")
    write_manifest(out_dir, "ablate", s, [Path(s.corpus)], [rows_path, table_path])
    return 0


# ----------------------------------------------------------------- parser

def _add_common(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                     help="global seed (falls back to SEJE_SEED, then 0)")


def _add_switches(sub):
    for key in _SWITCH_FLAGS:
        flag = "--" + key.lower().replace("_", "-")
        sub.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                         default=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(prog="seje",
                                     description="semantics-enhanced joint embedding pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = subs.add_parser("gen-data", help="generate a synthetic recipe-image corpus")
    _add_common(g)
    g.add_argument("--categories", type=int, required=True)
    g.add_argument("--per-category", dest="per_category", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-size", dest="vocab_size", type=int, default=S)
    g.add_argument("--ingredient-pool", dest="ingredient_pool", type=int, default=S)
    g.add_argument("--utensil-pool", dest="utensil_pool", type=int, default=S)
    g.add_argument("--action-pool", dest="action_pool", type=int, default=S)
    g.add_argument("--resolution", type=int, default=S)
    g.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("preprocess", help="train Phase I models and rate key terms")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rater", choices=sorted(RATER_NAMES), default=S)
    p.add_argument("--filter-threshold", dest="filter_threshold", type=float, default=S)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=S)
    p.add_argument("--val-frac", dest="val_frac", type=float, default=S)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=S)
    p.add_argument("--d-w", dest="d_w", type=int, default=S)
    p.add_argument("--d-s", dest="d_s", type=int, default=S)
    p.add_argument("--cbow-epochs", dest="cbow_epochs", type=int, default=S)
    p.add_argument("--tagger-epochs", dest="tagger_epochs", type=int, default=S)
    p.add_argument("--sentence-epochs", dest="sentence_epochs", type=int, default=S)
    p.add_argument("--classifier-epochs", dest="classifier_epochs", type=int, default=S)
    p.set_defaults(func=cmd_preprocess)

    t = subs.add_parser("train", help="train the joint embedding model")
    _add_common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--artifacts", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=S, help="resume from a train_state.pt checkpoint")
    for flag, typ in (("epochs", int), ("batch-size", int), ("lr", float), ("d", int),
                      ("lstm-hidden", int), ("disc-hidden", int), ("image-channels", int),
                      ("lambda1", float), ("lambda2", float), ("gamma", float),
                      ("margin", float), ("lambda-D", float), ("batch-all-margin", float),
                      ("disc-steps", int)):
        t.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=S)
    _add_switches(t)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="run the retrieval evaluation protocol")
    _add_common(e)
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--corpus", default=S)
    e.add_argument("--artifacts", default=S)
    e.add_argument("--embeddings", default=S, help="npz with 'recipe' and 'image' matrices")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default=S)
    e.add_argument("--subset-size", dest="subset_size", type=int, default=S)
    e.add_argument("--trials", type=int, default=S)
    e.add_argument("--plot", action="store_true", default=S,
                   help="write per-trial rank histograms")
    e.add_argument("--out", default=S)
    e.set_defaults(func=cmd_eval)

    r = subs.add_parser("retrieve", help="print top-k cross-modal results for a query")
    _add_common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--artifacts", required=True)
    r.add_argument("--query-image", dest="query_image", default=S)
    r.add_argument("--query-recipe", dest="query_recipe", default=S)
    r.add_argument("--top-k", dest="top_k", type=int, default=S)
    r.add_argument("--split", choices=("train", "val", "test", "all"), default=S)
    r.add_argument("--out", default=S)
    r.set_defaults(func=cmd_retrieve)

    a = subs.add_parser("ablate", help="train and evaluate the component ablation grid")
    _add_common(a)
    a.add_argument("--corpus", required=True)
    a.add_argument("--artifacts", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--rows", default=S, help="comma-separated ablation row names")
    for flag, typ in (("epochs", int), ("batch-size", int), ("lr", float), ("d", int),
                      ("lstm-hidden", int), ("disc-hidden", int),
                      ("subset-size", int), ("trials", int)):
        a.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=S)
    a.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
