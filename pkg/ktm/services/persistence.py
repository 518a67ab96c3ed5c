"""
Model directory format.

    manifest.json    format version, config, hyperparameters, sha256 per file
    topic_word.csv   topic,word_id,count            (non-zero expected counts)
    theta.csv        topic,word_id,probability      (expected topic-word rows)
    documents.csv    doc_id,alpha_<k>...,nu_<k>...
    messages.csv     doc_id,topic,mean,bridge_variance
    features.csv     doc_id plus feature columns (and author), or doc_id,node
    edges.csv        node_a,node_b                  (graph features only)
    trace.csv        sweep,perplexity,clamped

Reals are written with 17 significant digits so they read back exactly.
GPs are refitted from the stored messages on load.
"""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ktm.core.config import settings
from ktm.core.errors import IncompatibleModelError, ModelFormatError
from ktm.models.schemas import FeatureKind, ModelManifest
from ktm.services import gp
from ktm.services.engine import ModelState
from ktm.services.kernels import FeatureSpace
from ktm.services.vlda import TopicWordModel, expected_topic_word


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FLOAT_FORMAT = "%.17g"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


def _tables(state: ModelState) -> Dict[str, pd.DataFrame]:
    K = state.n_topics
    topics, words = np.nonzero(state.topic_word.counts)
    theta = expected_topic_word(state.topic_word)
    tables = {
        "topic_word.csv": pd.DataFrame({
            "topic": topics,
            "word_id": words,
            "count": state.topic_word.counts[topics, words],
        }),
        "theta.csv": pd.DataFrame({
            "topic": np.repeat(np.arange(K), theta.shape[1]),
            "word_id": np.tile(np.arange(theta.shape[1]), K),
            "probability": theta.ravel(),
        }),
    }
    documents = pd.DataFrame({"doc_id": state.doc_ids})
    for k in range(K):
        documents[f"alpha_{k}"] = state.priors[:, k]
    for k in range(K):
        documents[f"nu_{k}"] = state.nu[:, k]
    tables["documents.csv"] = documents

    if state.messages:
        tables["messages.csv"] = pd.DataFrame({
            "doc_id": np.tile(state.doc_ids, K),
            "topic": np.repeat(np.arange(K), state.n_docs),
            "mean": np.concatenate([m.means for m in state.messages]),
            "bridge_variance": np.concatenate([m.bridge_variances for m in state.messages]),
        })

    features = state.features
    if features.kind == FeatureKind.GRAPH:
        tables["features.csv"] = pd.DataFrame({"doc_id": state.doc_ids, "node": list(features.nodes)})
        tables["edges.csv"] = pd.DataFrame(list(features.edges or []), columns=["node_a", "node_b"])
    else:
        frame = pd.DataFrame({"doc_id": state.doc_ids})
        columns = list(features.columns) or [f"x{i}" for i in range(features.values.shape[1])]
        for i, name in enumerate(columns):
            frame[name] = features.values[:, i]
        if features.authors is not None:
            frame["author"] = features.authors
        tables["features.csv"] = frame

    clamped = state.clamped_trace + [0] * (len(state.perplexity_trace) - len(state.clamped_trace))
    tables["trace.csv"] = pd.DataFrame({
        "sweep": np.arange(1, len(state.perplexity_trace) + 1),
        "perplexity": state.perplexity_trace,
        "clamped": clamped,
    })
    return tables


def save_model(state: ModelState, path: Union[str, Path]) -> Path:
    """
    Write the model directory atomically: files go to a temporary sibling
    directory which then replaces ``path``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        hashes = {}
        for name, frame in _tables(state).items():
            _write_csv(frame, staging / name)
            hashes[name] = _sha256(staging / name)
        manifest = ModelManifest(
            format_version=settings.model_format_version,
            package_version=settings.version,
            config=state.config,
            hyperparameters=state.hypers,
            feature_kind=state.features.kind,
            n_docs=state.n_docs,
            vocab_size=state.topic_word.vocab_size,
            sweep_index=state.sweep_index,
            heldout_perplexity=state.heldout_perplexity,
            files=hashes,
            extra={"feature_columns": list(state.features.columns), "graph_capped": state.features.capped},
        )
        (staging / MANIFEST).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")

        previous = None
        if path.exists():
            previous = path.with_name(f".{path.name}.old-{os.getpid()}")
            os.replace(path, previous)
        os.replace(staging, path)
        if previous is not None:
            shutil.rmtree(previous, ignore_errors=True)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info(f"Saved model to {path}")
    return path


def _read_manifest(path: Path) -> ModelManifest:
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise ModelFormatError(f"{path}: no {MANIFEST}")
    raw = manifest_path.read_text(encoding="utf-8")
    try:
        manifest = ModelManifest.model_validate_json(raw)
    except ValidationError as e:
        # a version mismatch is reported as such even when the schema changed
        try:
            found = json.loads(raw).get("format_version")
        except ValueError:
            found = None
        if found is not None and found != settings.model_format_version:
            raise IncompatibleModelError(
                f"model format version {found}, this package reads version {settings.model_format_version}"
            )
        raise ModelFormatError(f"{manifest_path}: invalid manifest: {e}")
    if manifest.format_version != settings.model_format_version:
        raise IncompatibleModelError(
            f"model format version {manifest.format_version}, this package reads version "
            f"{settings.model_format_version}"
        )
    return manifest


def _verify(path: Path, manifest: ModelManifest):
    for name, expected in manifest.files.items():
        file_path = path / name
        if not file_path.is_file():
            raise ModelFormatError(f"{path}: missing {name}")
        if _sha256(file_path) != expected:
            raise ModelFormatError(f"{file_path}: checksum mismatch (truncated or modified)")


def _features(path: Path, manifest: ModelManifest, doc_ids) -> FeatureSpace:
    frame = _read_csv(path / "features.csv", dtype={"doc_id": str, "node": str, "author": str},
                      keep_default_na=False)
    if frame["doc_id"].tolist() != list(doc_ids):
        raise ModelFormatError(f"{path}: features.csv rows do not match documents.csv")
    if manifest.feature_kind == FeatureKind.GRAPH:
        edges = _read_csv(path / "edges.csv", dtype=str, keep_default_na=False)
        return FeatureSpace.graph(frame["node"].tolist(), list(zip(edges["node_a"], edges["node_b"])))
    columns = manifest.extra.get("feature_columns") or [c for c in frame.columns if c not in ("doc_id", "author")]
    authors = frame["author"].to_numpy() if "author" in frame.columns else None
    values = frame[[c for c in frame.columns if c not in ("doc_id", "author")]].to_numpy(dtype=float)
    return FeatureSpace.euclidean(values, authors=authors, columns=columns)


def load_model(path: Union[str, Path]) -> ModelState:
    """
    Read a model directory written by save_model. Every file is checked
    against the manifest checksums before any state is built.
    """
    path = Path(path)
    manifest = _read_manifest(path)
    _verify(path, manifest)
    config = manifest.config
    K, V = config.n_topics, manifest.vocab_size

    try:
        documents = _read_csv(path / "documents.csv", dtype={"doc_id": str}, keep_default_na=False)
        doc_ids = documents["doc_id"].tolist()
        priors = documents[[f"alpha_{k}" for k in range(K)]].to_numpy(dtype=float)
        nu = documents[[f"nu_{k}" for k in range(K)]].to_numpy(dtype=float)

        topic_word = _read_csv(path / "topic_word.csv")
        counts = np.zeros((K, V))
        counts[topic_word["topic"].to_numpy(dtype=int), topic_word["word_id"].to_numpy(dtype=int)] = \
            topic_word["count"].to_numpy(dtype=float)
        state_topic_word = TopicWordModel(beta=config.beta, counts=counts, topic_totals=counts.sum(axis=1))

        messages = []
        if "messages.csv" in manifest.files:
            frame = _read_csv(path / "messages.csv", dtype={"doc_id": str}, keep_default_na=False)
            for k in range(K):
                rows = frame[frame["topic"] == k]
                messages.append(gp.GaussianMessages(
                    means=rows["mean"].to_numpy(dtype=float),
                    bridge_variances=rows["bridge_variance"].to_numpy(dtype=float),
                    tau=manifest.hyperparameters.tau,
                ))

        trace = _read_csv(path / "trace.csv")
        features = _features(path, manifest, doc_ids)
    except (KeyError, ValueError, IndexError) as e:
        raise ModelFormatError(f"{path}: inconsistent model files: {e}")

    if priors.shape != (manifest.n_docs, K):
        raise ModelFormatError(f"{path}: documents.csv has shape {priors.shape}, expected {(manifest.n_docs, K)}")

    state = ModelState(
        config=config,
        features=features,
        doc_ids=doc_ids,
        topic_word=state_topic_word,
        priors=priors,
        nu=nu,
        messages=messages,
        gps=[],
        hypers=manifest.hyperparameters,
        sweep_index=manifest.sweep_index,
        perplexity_trace=trace["perplexity"].astype(float).tolist(),
        clamped_trace=trace["clamped"].astype(int).tolist(),
        heldout_perplexity=manifest.heldout_perplexity,
    )
    if config.use_gp and messages:
        state.gps = gp.fit_topics(
            state.hypers, features, messages,
            jitter_start=config.jitter_start, jitter_max=config.jitter_max,
        )
    logger.info(f"Loaded model from {path}: D={state.n_docs}, K={K}, sweep {state.sweep_index}")
    return state
