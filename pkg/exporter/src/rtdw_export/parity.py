"""Parity vectors: reference-model P(replaced) on fixed token-id inputs.

Inputs file: one space-separated token-id sequence per line. Output CSV:
header ``seq_index,position,p_replaced`` with probabilities printed to 8
significant digits. Pad tokens are attention-masked, matching how the
engine treats trailing padding.
"""
from __future__ import annotations

from .container import ExportError


def read_inputs(path) -> list:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                ids = [int(tok) for tok in line.split()]
            except ValueError:
                raise ExportError(f"{path}:{lineno}: non-integer token id") from None
            if not ids:
                continue
            sequences.append(ids)
    if not sequences:
        raise ExportError(f"{path}: no input sequences")
    return sequences


def emit_parity(source: str, inputs_path, output_path) -> int:
    """Run the reference discriminator on every input sequence; returns the
    number of rows written."""
    import torch
    from transformers import ElectraForPreTraining

    model = ElectraForPreTraining.from_pretrained(source)
    model.eval()
    max_len = model.config.max_position_embeddings
    pad_id = model.config.pad_token_id or 0
    sequences = read_inputs(inputs_path)
    rows = 0
    with open(output_path, "w", encoding="utf-8") as out:
        out.write("seq_index,position,p_replaced\n")
        for seq_index, ids in enumerate(sequences):
            if len(ids) > max_len:
                raise ExportError(
                    f"sequence {seq_index} has {len(ids)} tokens, reference "
                    f"maximum is {max_len}")
            if any(i < 0 or i >= model.config.vocab_size for i in ids):
                raise ExportError(f"sequence {seq_index}: token id out of range")
            input_ids = torch.tensor([ids], dtype=torch.long)
            attention_mask = (input_ids != pad_id).long()
            with torch.no_grad():
                logits = model(input_ids=input_ids,
                               attention_mask=attention_mask).logits[0]
            probs = torch.sigmoid(logits).tolist()
            for position, p in enumerate(probs):
                out.write(f"{seq_index},{position},{p:.8g}\n")
                rows += 1
    return rows
