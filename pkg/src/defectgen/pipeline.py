"""Generation orchestration: records, manifest, alignment export, eval.

A generation run is fully determined by (config, seed): per output
record an independent random stream is spawned from the run seed, and
every stochastic choice (source image, exemplar, mask flips, noise
scale, sampling noise) is drawn from that stream in a fixed order.
Running the same configuration twice produces byte-identical images
and manifests.

The manifest is a text file whose first line names the schema version,
followed by one JSON record per line.  Paths are stored relative to the
manifest location.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cama import PatchDescriptor, align
from .config import PipelineConfig
from .dataset import ClassLayout, augment_mask, load_exemplars, load_normals
from .denoiser import ConvDenoiser
from .errors import AlignmentError, DataError
from .imgio import save_image, save_mask
from .metrics import extract_features, ic_lpips, kid
from .prompt import PromptEmbedding
from .sampler import sample_inpaint
from .schedule import MgniConfig
from .trainer import split_train_test

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# defectgen-manifest v1"


@dataclass
class GenerationRecord:
    """Provenance of one synthesized image + mask pair."""

    index: int
    status: str  # "ok" | "skipped"
    image_path: str
    mask_path: str
    normal_id: str
    exemplar_id: str
    seed: int
    a: float
    sigma: float
    schedule_id: str
    cama: bool
    cama_fallback: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "GenerationRecord":
        return cls(**json.loads(line))


def write_manifest(path, records: list[GenerationRecord]) -> None:
    with open(path, "w") as f:
        f.write(MANIFEST_HEADER + "\n")
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_manifest(path) -> list[GenerationRecord]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DataError(f"{path} is not a manifest (missing header)")
    return [GenerationRecord.from_json(line) for line in lines[1:] if line.strip()]


def generate(
    cls: ClassLayout,
    net: ConvDenoiser,
    embedding: PromptEmbedding,
    cfg: PipelineConfig,
    out_dir,
    n: int,
    seed: int,
    cama_enabled: bool | None = None,
) -> list[GenerationRecord]:
    """Synthesize ``n`` image + mask pairs for one class.

    Per record, draws happen in this order: source normal image,
    exemplar, mask flips (two draws), then alignment (no draws), the
    noise scale a, and finally the sampling noise.  Alignment failures
    are retried with fresh draws up to ``cfg.retry_limit`` attempts,
    after which the record is written as skipped.
    """
    if cama_enabled is None:
        cama_enabled = cfg.cama
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    normals = load_normals(cls, cfg.image_size)
    if not normals:
        raise DataError(f"class {cls.name} has no normal images")
    exemplars_all = load_exemplars(cls, cfg.image_size)
    if not exemplars_all:
        raise DataError(f"class {cls.name} has no anomaly exemplars")
    train_ex, _ = split_train_test(exemplars_all)
    if not train_ex:
        raise DataError(
            f"class {cls.name}: train split is empty "
            f"({len(exemplars_all)} exemplars); need at least 3"
        )
    shapes = {img.shape for img in normals} | {ex.image.shape for ex in train_ex}
    if len(shapes) > 1:
        raise DataError(
            f"class {cls.name} mixes image sizes {sorted(shapes)}; set image_size"
        )

    schedule = cfg.make_schedule()
    codec = cfg.make_codec()
    gpp = cfg.make_gpp()
    descriptor = PatchDescriptor(k=cfg.patch_size)

    records = []
    streams = np.random.SeedSequence(seed).spawn(n)
    for i in range(n):
        rng = np.random.default_rng(streams[i])
        record = None
        for _attempt in range(max(1, cfg.retry_limit)):
            normal_idx = int(rng.integers(len(normals)))
            exemplar_idx = int(rng.integers(len(train_ex)))
            normal = normals[normal_idx]
            exemplar = train_ex[exemplar_idx]
            mask = augment_mask(exemplar.mask, rng)
            fallback = False
            if cama_enabled:
                try:
                    result = align(mask, exemplar, normal, descriptor)
                except AlignmentError:
                    continue
                mask = result.mask
                fallback = result.fallback
            a = float(rng.uniform(cfg.a_min, cfg.a_max))
            out = sample_inpaint(
                normal, mask, net, schedule, embedding, gpp,
                MgniConfig(a=a, t_min=cfg.t_min), codec, rng,
            )
            image_name = f"{cls.name}_{i:04d}.png"
            mask_name = f"{cls.name}_{i:04d}_mask.png"
            save_image(out_dir / image_name, out)
            save_mask(out_dir / mask_name, mask)
            record = GenerationRecord(
                index=i, status="ok", image_path=image_name, mask_path=mask_name,
                normal_id=f"{normal_idx:03d}", exemplar_id=f"{exemplar_idx:03d}",
                seed=seed, a=a, sigma=cfg.sigma, schedule_id=cfg.schedule_id,
                cama=cama_enabled, cama_fallback=fallback,
            )
            break
        if record is None:
            record = GenerationRecord(
                index=i, status="skipped", image_path="", mask_path="",
                normal_id="", exemplar_id="", seed=seed, a=0.0, sigma=cfg.sigma,
                schedule_id=cfg.schedule_id, cama=cama_enabled, cama_fallback=False,
            )
        records.append(record)
    write_manifest(out_dir / MANIFEST_NAME, records)
    return records


# ---------------------------------------------------------------------------
# Alignment export


def write_alignment(out_dir, result, exemplar_id: str, stem: str = "aligned") -> tuple[Path, Path]:
    """Write the aligned mask plus a text sidecar with the chosen points."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / f"{stem}_mask.png"
    sidecar_path = out_dir / f"{stem}.txt"
    save_mask(mask_path, result.mask)
    with open(sidecar_path, "w") as f:
        f.write(f"exemplar = {exemplar_id}\n")
        f.write(f"q_upper = {result.q_upper[0]},{result.q_upper[1]}\n")
        f.write(f"q_lower = {result.q_lower[0]},{result.q_lower[1]}\n")
        f.write(f"q_center = {result.q_center[0]},{result.q_center[1]}\n")
        f.write(f"fallback = {'true' if result.fallback else 'false'}\n")
    return mask_path, sidecar_path


# ---------------------------------------------------------------------------
# Evaluation report


@dataclass
class EvalReport:
    class_name: str
    n_real: int
    n_generated: int
    kid_raw: float
    kid_x1000: float
    ic_diversity: float | None
    n_clusters: int

    def format(self) -> str:
        ic = "n/a" if self.ic_diversity is None else f"{self.ic_diversity:.4f}"
        return (
            f"class {self.class_name}: "
            f"kid={self.kid_raw:.6g} (x1000: {self.kid_x1000:.4f})  "
            f"ic-diversity={ic} over {self.n_clusters} cluster(s)  "
            f"[real n={self.n_real}, generated n={self.n_generated}]"
        )


def evaluate(
    class_name: str,
    real_images: list[np.ndarray],
    generated_images: list[np.ndarray],
    clusters: list[list[np.ndarray]],
    feature_cfg,
) -> EvalReport:
    """KID between real and generated sets, plus the intra-cluster
    diversity proxy over clusters with at least two members."""
    real = extract_features(real_images, feature_cfg)
    fake = extract_features(generated_images, feature_cfg)
    kid_raw = kid(real, fake)
    usable = [c for c in clusters if len(c) >= 2]
    diversity = ic_lpips(usable, feature_cfg) if usable else None
    return EvalReport(
        class_name=class_name,
        n_real=real.n,
        n_generated=fake.n,
        kid_raw=kid_raw,
        kid_x1000=1000.0 * kid_raw,
        ic_diversity=diversity,
        n_clusters=len(usable),
    )


def cluster_generated(records: list[GenerationRecord], images_by_name: dict) -> list[list]:
    """Group generated images by their source normal image."""
    groups: dict[str, list] = {}
    for rec in records:
        if rec.status != "ok":
            continue
        groups.setdefault(rec.normal_id, []).append(images_by_name[rec.image_path])
    return [groups[k] for k in sorted(groups)]
