"""Checkpoint persistence: one tensor archive plus meta.json per directory.

The archive is an ``.npz``-compatible zip of little-endian float32 arrays,
written with sorted names and fixed entry timestamps so that saving the same
checkpoint twice yields identical bytes.
"""
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from segland.core import (
    ArchConfig,
    Checkpoint,
    ClassTaxonomy,
    PrototypeBank,
    TrainingPhase,
)
from segland.errors import MissingArtifactError
from segland.model import SegmentationNetwork

logger = logging.getLogger(__name__)

TENSOR_ARCHIVE = "tensors.npz"
META_FILE = "meta.json"
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_archive(path: Path, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            with archive.open(info, "w", force_zip64=True) as handle:
                np.lib.format.write_array(handle, np.ascontiguousarray(arrays[name], dtype="<f4"), allow_pickle=False)


def save_checkpoint(ckpt: Checkpoint, directory: Union[str, Path]) -> Path:
    """Write `tensors.npz` and `meta.json` under directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays = {f"encoder/{k}": v for k, v in ckpt.encoder_params.items()}
    arrays.update({f"decoder/{k}": v for k, v in ckpt.decoder_params.items()})
    arrays["bank/prototypes"] = ckpt.bank.prototypes.detach().cpu().float().numpy()
    _write_archive(directory / TENSOR_ARCHIVE, arrays)

    meta = {
        "phase": ckpt.phase.value,
        "config_digest": ckpt.config_digest,
        "parent_digest": ckpt.parent_digest,
        "taxonomy": ckpt.taxonomy.model_dump(mode="json"),
        "arch": ckpt.arch.model_dump(mode="json"),
        "embed_dim": ckpt.bank.dim,
        "temperature": ckpt.bank.temperature,
        "frozen_mask": list(ckpt.bank.frozen_mask),
    }
    (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Saved {ckpt.phase.value} checkpoint to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    archive_path, meta_path = directory / TENSOR_ARCHIVE, directory / META_FILE
    if not archive_path.is_file() or not meta_path.is_file():
        raise MissingArtifactError(f"No checkpoint found in {directory}")

    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    encoder, decoder = {}, {}
    with np.load(archive_path, allow_pickle=False) as archive:
        for name in archive.files:
            group, key = name.split("/", 1)
            if group == "encoder":
                encoder[key] = archive[name]
            elif group == "decoder":
                decoder[key] = archive[name]
        prototypes = torch.from_numpy(archive["bank/prototypes"].astype(np.float32))

    bank = PrototypeBank(prototypes=prototypes, frozen_mask=meta["frozen_mask"], temperature=meta["temperature"])
    return Checkpoint(
        encoder_params=encoder,
        decoder_params=decoder,
        bank=bank,
        taxonomy=ClassTaxonomy.model_validate(meta["taxonomy"]),
        arch=ArchConfig.model_validate(meta["arch"]),
        config_digest=meta["config_digest"],
        phase=TrainingPhase(meta["phase"]),
        parent_digest=meta.get("parent_digest"),
    )


def network_from_checkpoint(ckpt: Checkpoint) -> SegmentationNetwork:
    """Rebuild the network a checkpoint was taken from, in eval mode"""
    network = SegmentationNetwork(ckpt.arch, ckpt.bank, ckpt.taxonomy.num_base_rows)
    network.load_params(ckpt.encoder_params, ckpt.decoder_params)
    network.eval()
    return network


def checkpoint_from_network(
    network: SegmentationNetwork,
    taxonomy: ClassTaxonomy,
    config_digest: str,
    phase: TrainingPhase,
    parent_digest: Optional[str] = None,
) -> Checkpoint:
    params = network.export_params()
    return Checkpoint(
        encoder_params=params["encoder"],
        decoder_params=params["decoder"],
        bank=network.head.to_bank(),
        taxonomy=taxonomy,
        arch=network.arch,
        config_digest=config_digest,
        phase=phase,
        parent_digest=parent_digest,
    )
