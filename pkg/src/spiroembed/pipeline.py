"""Downstream classification: probe over frozen embeddings, fusion, boosted trees, top-k ensemble."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import gbdt, nn
from .augment import AugmentDistribution
from .byol import EncoderCheckpoint, SlseConfig, embed, pretrain
from .cohort import DemographicVector, SubjectRecord, feature_names
from .evaluation import EvalReport, auroc, subgroup_analysis
from .exceptions import FormatError, ParameterError, ValidationError

log = logging.getLogger(__name__)

ABLATIONS = ("no_ensemble", "no_encoder", "no_augment", "embedding_only")
MODES = ("fused", "demographics", "probe_head")
ENSEMBLE_FORMAT_VERSION = 1


def derive_seed(seed: int, *tags) -> int:
    """Child seed for a named stage, stable across runs and platforms."""
    digest = hashlib.sha256(":".join([str(seed), *map(str, tags)]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


# --- splitting -------------------------------------------------------------


class SealedTest:
    """Held-out records whose labels are only read by :func:`evaluate_ensemble`."""

    def __init__(self, records: Sequence[SubjectRecord]):
        self._records = list(records)

    def __len__(self):
        return len(self._records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self._records]

    def _unseal(self) -> list[SubjectRecord]:
        return self._records


def split_dataset(
    records: Sequence[SubjectRecord], ratios=(0.7, 0.15, 0.15), seed: int = 0
) -> tuple[list[SubjectRecord], list[SubjectRecord], SealedTest]:
    """Label-stratified train/validation/test split."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ParameterError("ratios must be three nonnegative numbers summing to 1")
    rng = np.random.default_rng(seed)
    labels = np.array([r.label_rhf for r in records])
    parts = ([], [], [])
    cum = np.cumsum(ratios)
    for cls in (0, 1):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        b1, b2 = (int(round(c * len(idx))) for c in cum[:2])
        for part, chunk in zip(parts, (idx[:b1], idx[b1:b2], idx[b2:])):
            part.extend(chunk.tolist())
    out = []
    for name, part in zip(("train", "validation", "test"), parts):
        part.sort()
        if part and labels[part].sum() == 0:
            raise ValidationError(f"{name} split has no positive records")
        out.append([records[i] for i in part])
    return out[0], out[1], SealedTest(out[2])


# --- probe -----------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 16
    steps: int = 500
    lr: float = 1e-2
    seed: int = 0


class Probe:
    """MLP latent -> hidden -> 1 on standardized embeddings.

    The post-ReLU hidden layer is the fused embedding feature.
    """

    def __init__(self, network: nn.Network, params: nn.ParameterSet, mean, scale):
        self.network = network
        self.params = params
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def build(cls, in_dim: int, hidden: int) -> nn.Network:
        return nn.Network([nn.dense(hidden), nn.relu(), nn.dense(1)], (in_dim,), "probe.")

    @property
    def hidden(self) -> int:
        return self.network.layers[0].units

    def _standardize(self, emb) -> np.ndarray:
        return (np.atleast_2d(emb) - self.mean) / self.scale

    def features(self, emb) -> np.ndarray:
        x = self._standardize(emb)
        key = self.network.prefix + "0."
        return np.maximum(x @ self.params[key + "W"] + self.params[key + "b"], 0.0)

    def logit(self, emb) -> np.ndarray:
        out, _ = nn.forward(self.network, self.params, self._standardize(emb))
        return out[:, 0]

    def predict_proba(self, emb) -> np.ndarray:
        return expit(self.logit(emb))

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "probe", "network": self.network.to_dict(),
                  "mean": self.mean.tolist(), "scale": self.scale.tolist()}
        header.update(extra or {})
        nn.save_checkpoint(path, self.params, header)

    @classmethod
    def load(cls, path) -> "Probe":
        params, header = nn.load_checkpoint(path)
        if header.get("kind") != "probe":
            raise FormatError(f"{path} is not a probe checkpoint")
        return cls(nn.Network.from_dict(header["network"]), params, header["mean"], header["scale"])


def probe_loss_and_grad(probe: Probe, emb, labels) -> float:
    """Mean logistic loss; gradients are accumulated into ``probe.params``."""
    y = np.asarray(labels, dtype=np.float64)
    z, tape = nn.forward(probe.network, probe.params, probe._standardize(emb))
    z = z[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    nn.backward(tape, ((expit(z) - y) / len(y))[:, None])
    return loss


def train_probe(embeddings, labels, config: ProbeConfig = ProbeConfig()) -> Probe:
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ValidationError("probe training needs both classes")
    scale = emb.std(axis=0)
    scale[scale == 0] = 1.0
    net = Probe.build(emb.shape[1], config.hidden)
    probe = Probe(net, net.init_params(np.random.default_rng(config.seed)), emb.mean(axis=0), scale)
    for _ in range(config.steps):
        probe.params.zero_grad()
        probe_loss_and_grad(probe, emb, y)
        nn.adam_step(probe.params, lr=config.lr)
    return probe


# --- fusion ----------------------------------------------------------------


def fused_feature_names(hidden: int = 16, extended: bool = False) -> list[str]:
    return [f"embed_{i}" for i in range(hidden)] + feature_names(extended)


def fuse(embed_features, demos, extended: bool = False) -> np.ndarray:
    """Concatenate probe features with demographics in a fixed order."""
    e = np.asarray(embed_features, dtype=np.float64)
    if isinstance(demos, DemographicVector):
        return np.concatenate([e.ravel(), demos.values(extended)])
    d = np.array([demo.values(extended) for demo in demos], dtype=np.float64)
    return np.hstack([np.atleast_2d(e), d])


# --- bundles and ensembles -------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    n_runs: int = 10
    k: int = 3
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    trees: gbdt.GbdtParams = field(default_factory=lambda: gbdt.GbdtParams(subsample=0.8))
    extended: bool = False
    seed: int = 0


@dataclass
class ClassifierBundle:
    mode: str
    seed: int
    val_auroc: float
    feature_names: list[str]
    probe: Probe | None = None
    model: gbdt.GbdtModel | None = None
    extended: bool = False

    def features(self, emb, demos) -> np.ndarray:
        if self.mode == "fused":
            return fuse(self.probe.features(emb), demos, self.extended)
        return np.array([d.values(self.extended) for d in demos], dtype=np.float64)

    def predict_proba(self, emb, demos) -> np.ndarray:
        if self.mode == "probe_head":
            return self.probe.predict_proba(emb)
        return np.atleast_1d(self.model.predict_proba(self.features(emb, demos)))


@dataclass
class EnsembleBundle:
    """Top-k bundles (sorted by validation AUROC, best first) and the encoder they share."""

    bundles: list[ClassifierBundle]
    encoder: EncoderCheckpoint | None
    mode: str
    metadata: dict = field(default_factory=dict)

    def embeddings(self, records: Sequence[SubjectRecord]) -> np.ndarray | None:
        if self.encoder is None:
            return None
        return embed(self.encoder, [r.curve for r in records])

    def predict_many(self, records: Sequence[SubjectRecord], emb=None) -> np.ndarray:
        if emb is None:
            emb = self.embeddings(records)
        demos = [r.demo for r in records]
        probs = np.stack([b.predict_proba(emb, demos) for b in self.bundles])
        return probs.mean(axis=0)

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": ENSEMBLE_FORMAT_VERSION,
            "mode": self.mode,
            "metadata": self.metadata,
            "bundles": [],
        }
        manifest.update(extra or {})
        if self.encoder is not None:
            self.encoder.save(d / "encoder.ckpt")
        for i, b in enumerate(self.bundles):
            entry = {"dir": f"bundle_{i}", "mode": b.mode, "seed": b.seed, "val_auroc": b.val_auroc,
                     "feature_names": b.feature_names, "extended": b.extended}
            (d / entry["dir"]).mkdir(exist_ok=True)
            if b.probe is not None:
                b.probe.save(d / entry["dir"] / "probe.ckpt")
            if b.model is not None:
                b.model.save(d / entry["dir"] / "trees.json")
            manifest["bundles"].append(entry)
        tmp = d / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        tmp.replace(d / "manifest.json")

    @classmethod
    def load(cls, directory) -> "EnsembleBundle":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format_version") != ENSEMBLE_FORMAT_VERSION:
            raise FormatError(f"unsupported ensemble format version {manifest.get('format_version')}")
        encoder = EncoderCheckpoint.load(d / "encoder.ckpt") if (d / "encoder.ckpt").exists() else None
        bundles = []
        for e in manifest["bundles"]:
            sub = d / e["dir"]
            bundles.append(
                ClassifierBundle(
                    mode=e["mode"],
                    seed=e["seed"],
                    val_auroc=e["val_auroc"],
                    feature_names=e["feature_names"],
                    probe=Probe.load(sub / "probe.ckpt") if (sub / "probe.ckpt").exists() else None,
                    model=gbdt.GbdtModel.load(sub / "trees.json") if (sub / "trees.json").exists() else None,
                    extended=e["extended"],
                )
            )
        return cls(bundles, encoder, manifest["mode"], manifest.get("metadata", {}))


def _train_bundle(mode, seed, emb_tr, demos_tr, y_tr, emb_va, demos_va, y_va, config: EnsembleConfig):
    probe = None
    if mode in ("fused", "probe_head"):
        probe = train_probe(emb_tr, y_tr, replace(config.probe, seed=seed))
    names = (fused_feature_names(config.probe.hidden, config.extended) if mode == "fused"
             else feature_names(config.extended) if mode == "demographics" else [f"latent_{i}" for i in range(emb_tr.shape[1])])
    bundle = ClassifierBundle(mode, seed, 0.0, names, probe, None, config.extended)
    if mode != "probe_head":
        X = bundle.features(emb_tr, demos_tr)
        bundle.model = gbdt.fit(X, y_tr, replace(config.trees, seed=seed), names)
    bundle.val_auroc = auroc(bundle.predict_proba(emb_va, demos_va), y_va)
    return bundle


def train_ensemble(
    train: Sequence[SubjectRecord],
    val: Sequence[SubjectRecord],
    encoder: EncoderCheckpoint | None,
    config: EnsembleConfig = EnsembleConfig(),
    mode: str = "fused",
) -> EnsembleBundle:
    """Train ``n_runs`` bundles with distinct seeds and keep the ``k`` best on validation AUROC."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if config.n_runs < config.k or config.k < 1:
        raise ParameterError("need n_runs >= k >= 1")
    if mode != "demographics" and encoder is None:
        raise ParameterError(f"mode {mode!r} needs an encoder")
    uses_encoder = mode != "demographics"
    emb_tr = embed(encoder, [r.curve for r in train]) if uses_encoder else None
    emb_va = embed(encoder, [r.curve for r in val]) if uses_encoder else None
    y_tr = np.array([r.label_rhf for r in train])
    y_va = np.array([r.label_rhf for r in val])
    demos_tr = [r.demo for r in train]
    demos_va = [r.demo for r in val]
    bundles = []
    for run in range(config.n_runs):
        seed = derive_seed(config.seed, "run", run)
        bundles.append(_train_bundle(mode, seed, emb_tr, demos_tr, y_tr, emb_va, demos_va, y_va, config))
        log.info("run %d (%s) validation AUROC %.4f", run, mode, bundles[-1].val_auroc)
    ranked = sorted(range(len(bundles)), key=lambda i: (-bundles[i].val_auroc, i))
    kept = [bundles[i] for i in ranked[: config.k]]
    meta = {"n_runs": config.n_runs, "k": config.k, "all_val_auroc": [b.val_auroc for b in bundles],
            "selected_runs": ranked[: config.k]}
    return EnsembleBundle(kept, encoder if uses_encoder else None, mode, meta)


def predict(ensemble: EnsembleBundle, record: SubjectRecord) -> float:
    """Mean member probability for one subject."""
    return float(ensemble.predict_many([record])[0])


def evaluate_ensemble(ensemble: EnsembleBundle, test: SealedTest, subgroups=None, metadata=None) -> EvalReport:
    records = test._unseal()
    probs = ensemble.predict_many(records)
    labels = np.array([r.label_rhf for r in records])
    return subgroup_analysis(records, probs, labels, subgroups, metadata)


# --- experiments -----------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    slse: SlseConfig = field(default_factory=SlseConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)


def pretrain_encoder(records: Sequence[SubjectRecord], config: PipelineConfig, identity_augment=False):
    """Pretrain on the curves of ``records``; labels are never passed on."""
    slse = replace(config.slse, seed=derive_seed(config.seed, "pretrain"))
    if identity_augment:
        slse = replace(slse, augment=AugmentDistribution.identity(), augment_prime=AugmentDistribution.identity())
    return pretrain([r.curve for r in records], slse)


def split_for(records: Sequence[SubjectRecord], config: PipelineConfig):
    return split_dataset(records, config.ratios, derive_seed(config.seed, "split"))


def fit_experiment(
    name: str,
    train: Sequence[SubjectRecord],
    val: Sequence[SubjectRecord],
    config: PipelineConfig = PipelineConfig(),
    encoder: EncoderCheckpoint | None = None,
) -> EnsembleBundle:
    """Train the ensemble for the full pipeline (``name="full"``) or one ablation.

    ``encoder`` is reused when given, except for ``no_augment`` which always
    pretrains its own encoder without augmentation.
    """
    if name not in ("full",) + ABLATIONS:
        raise ParameterError(f"unknown configuration {name!r}")
    ens_cfg = replace(config.ensemble, seed=derive_seed(config.seed, "ensemble"))
    mode = {"no_encoder": "demographics", "embedding_only": "probe_head"}.get(name, "fused")
    if name == "no_ensemble":
        ens_cfg = replace(ens_cfg, k=1)
    if name == "no_augment":
        encoder = pretrain_encoder(list(train) + list(val), config, identity_augment=True)
    elif mode != "demographics" and encoder is None:
        encoder = pretrain_encoder(list(train) + list(val), config)
    ensemble = train_ensemble(train, val, encoder, ens_cfg, mode)
    ensemble.metadata["config"] = name
    return ensemble


def experiment_summary(name: str, ensemble: EnsembleBundle, report: EvalReport) -> dict:
    return {
        "config": name,
        "test_auroc": report.auroc,
        "n_test": report.n,
        "n_bundles": len(ensemble.bundles),
        "val_auroc": [b.val_auroc for b in ensemble.bundles],
        "feature_names": ensemble.bundles[0].feature_names,
        "report": report.to_dict(),
    }


def run_experiment(
    name: str,
    records: Sequence[SubjectRecord],
    config: PipelineConfig = PipelineConfig(),
    encoder: EncoderCheckpoint | None = None,
) -> dict:
    """Split, train and evaluate on the sealed test partition."""
    train, val, test = split_for(records, config)
    ensemble = fit_experiment(name, train, val, config, encoder)
    report = evaluate_ensemble(ensemble, test, metadata={"config": name, "seed": config.seed})
    return experiment_summary(name, ensemble, report)


def run_ablation(name: str, records: Sequence[SubjectRecord], config: PipelineConfig = PipelineConfig(),
                 encoder: EncoderCheckpoint | None = None) -> dict:
    if name not in ABLATIONS:
        raise ParameterError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return run_experiment(name, records, config, encoder)
