"""Checkpoint conversion: ELECTRA state dicts to the RTDW naming scheme.

The source-to-target mapping is an exhaustive, checked table built from the
checkpoint configuration. Any source tensor without a mapping entry, or any
mapped tensor missing from the checkpoint, aborts the export; silent
mis-mapping would corrupt downstream parity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import (ROLE_DISCRIMINATOR, ROLE_GENERATOR, ExportError,
                        config_tensor, write_container)

# torch Linear stores (out_features, in_features); RTDW expects (in, out)
TRANSPOSE = "transpose"
DIRECT = "direct"


@dataclass(frozen=True)
class ExportManifest:
    source_id: str
    mapping: dict          # source tensor name -> (rtdw name, DIRECT|TRANSPOSE)
    config: np.ndarray     # the nine-scalar model_config tensor


def _electra_config_values(cfg) -> dict:
    return {
        "num_layers": cfg.num_hidden_layers,
        "hidden": cfg.hidden_size,
        "heads": cfg.num_attention_heads,
        "intermediate": cfg.intermediate_size,
        "vocab_size": cfg.vocab_size,
        "max_positions": cfg.max_position_embeddings,
        "embedding_size": cfg.embedding_size,
        "pad_id": cfg.pad_token_id or 0,
    }


def build_manifest(model, source_id: str = "") -> ExportManifest:
    """Mapping table for an ElectraForPreTraining (discriminator) or
    ElectraForMaskedLM (generator) checkpoint."""
    cfg = model.config
    vals = _electra_config_values(cfg)
    state = model.state_dict()
    if any(k.startswith("discriminator_predictions.") for k in state):
        role = ROLE_DISCRIMINATOR
    elif any(k.startswith("generator_predictions.") for k in state):
        role = ROLE_GENERATOR
    else:
        raise ExportError("checkpoint has neither a discriminator nor a generator head")

    mapping = {
        "electra.embeddings.word_embeddings.weight": ("embeddings.word", DIRECT),
        "electra.embeddings.position_embeddings.weight": ("embeddings.position", DIRECT),
        "electra.embeddings.token_type_embeddings.weight": ("embeddings.token_type", DIRECT),
        "electra.embeddings.LayerNorm.weight": ("embeddings.ln.gain", DIRECT),
        "electra.embeddings.LayerNorm.bias": ("embeddings.ln.bias", DIRECT),
    }
    if vals["embedding_size"] != vals["hidden"]:
        mapping["electra.embeddings_project.weight"] = ("embeddings_project.w", TRANSPOSE)
        mapping["electra.embeddings_project.bias"] = ("embeddings_project.b", DIRECT)
    for i in range(vals["num_layers"]):
        src = f"electra.encoder.layer.{i}."
        dst = f"layer.{i}."
        for hf, ours in (("query", "q"), ("key", "k"), ("value", "v")):
            mapping[src + f"attention.self.{hf}.weight"] = (dst + f"attn.{ours}.w", TRANSPOSE)
            mapping[src + f"attention.self.{hf}.bias"] = (dst + f"attn.{ours}.b", DIRECT)
        mapping[src + "attention.output.dense.weight"] = (dst + "attn.out.w", TRANSPOSE)
        mapping[src + "attention.output.dense.bias"] = (dst + "attn.out.b", DIRECT)
        mapping[src + "attention.output.LayerNorm.weight"] = (dst + "ln1.gain", DIRECT)
        mapping[src + "attention.output.LayerNorm.bias"] = (dst + "ln1.bias", DIRECT)
        mapping[src + "intermediate.dense.weight"] = (dst + "ffn.w1", TRANSPOSE)
        mapping[src + "intermediate.dense.bias"] = (dst + "ffn.b1", DIRECT)
        mapping[src + "output.dense.weight"] = (dst + "ffn.w2", TRANSPOSE)
        mapping[src + "output.dense.bias"] = (dst + "ffn.b2", DIRECT)
        mapping[src + "output.LayerNorm.weight"] = (dst + "ln2.gain", DIRECT)
        mapping[src + "output.LayerNorm.bias"] = (dst + "ln2.bias", DIRECT)
    if role == ROLE_DISCRIMINATOR:
        mapping["discriminator_predictions.dense.weight"] = ("head.dense.w", TRANSPOSE)
        mapping["discriminator_predictions.dense.bias"] = ("head.dense.b", DIRECT)
        mapping["discriminator_predictions.dense_prediction.weight"] = ("head.out.w", TRANSPOSE)
        mapping["discriminator_predictions.dense_prediction.bias"] = ("head.out.b", DIRECT)
    else:
        mapping["generator_predictions.dense.weight"] = ("head.dense.w", TRANSPOSE)
        mapping["generator_predictions.dense.bias"] = ("head.dense.b", DIRECT)
        mapping["generator_predictions.LayerNorm.weight"] = ("head.ln.gain", DIRECT)
        mapping["generator_predictions.LayerNorm.bias"] = ("head.ln.bias", DIRECT)
        mapping["generator_lm_head.bias"] = ("head.out_bias", DIRECT)

    cfg_arr = config_tensor(vals["num_layers"], vals["hidden"], vals["heads"],
                            vals["intermediate"], vals["vocab_size"],
                            vals["max_positions"], vals["embedding_size"],
                            role, vals["pad_id"])
    return ExportManifest(source_id=source_id, mapping=mapping, config=cfg_arr)


def convert_state_dict(model, manifest: ExportManifest) -> dict:
    """Apply the mapping table; fails loudly on gaps in either direction."""
    state = {k: v for k, v in model.state_dict().items()}
    # the generator output projection is tied to the word embeddings; its
    # standalone copy (when present) is redundant and deliberately unmapped
    ignorable = {"generator_lm_head.weight"}
    unmapped = sorted(set(state) - set(manifest.mapping) - ignorable)
    if unmapped:
        raise ExportError(f"unmapped source tensors: {unmapped}")
    missing = sorted(set(manifest.mapping) - set(state))
    if missing:
        raise ExportError(f"checkpoint is missing mapped tensors: {missing}")
    out = {}
    for src, (dst, op) in manifest.mapping.items():
        t = state[src].detach().cpu()
        if not t.dtype.is_floating_point:
            raise ExportError(f"tensor {src!r} has non-float dtype {t.dtype}")
        arr = t.to("cpu").numpy().astype(np.float32)
        out[dst] = arr.T.copy() if op == TRANSPOSE else arr
    out["model_config"] = manifest.config
    return out


def export_checkpoint(source: str, output_path, kind: str = "discriminator") -> ExportManifest:
    """Load an ELECTRA checkpoint (local path or hub id) and write RTDW."""
    from transformers import ElectraForMaskedLM, ElectraForPreTraining

    if kind == "discriminator":
        model = ElectraForPreTraining.from_pretrained(source)
    elif kind == "generator":
        model = ElectraForMaskedLM.from_pretrained(source)
    else:
        raise ExportError(f"unknown checkpoint kind {kind!r}")
    model.eval()
    manifest = build_manifest(model, source_id=str(source))
    tensors = convert_state_dict(model, manifest)
    write_container(tensors, output_path)
    return manifest
