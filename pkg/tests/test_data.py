"""Sequence file IO and synthetic generators."""

import json

import numpy as np
import pytest

from mmprune.data import (ModalitySpec, generate_sequences, load_sequences,
                          make_noisy_modality_scenario, write_sequences)
from mmprune.errors import FormatError


def make_specs():
    return [ModalitySpec("visual", 5, scale=2.0), ModalitySpec("language", 3)]


def test_write_load_round_trip(tmp_path):
    seqs = generate_sequences(4, 8, make_specs(), seed=3)
    write_sequences(seqs, tmp_path, "calib")
    loaded = load_sequences(tmp_path / "calib.jsonl")
    assert len(loaded) == len(seqs)
    for a, b in zip(seqs, loaded):
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert [(s.modality.name, s.start, s.length) for s in a.spans] == \
               [(s.modality.name, s.start, s.length) for s in b.spans]


def test_record_schema_matches_contract(tmp_path):
    seqs = generate_sequences(2, 8, make_specs(), seed=1)
    path = write_sequences(seqs, tmp_path, "calib")
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records[0]["spans"][0] == {"modality": "visual", "len": 5}
    assert records[0]["embeddings_file"] == "calib_embeddings.bin"
    assert records[0]["row_offset"] == 0
    assert records[1]["row_offset"] == 8
    blob = (tmp_path / "calib_embeddings.bin").read_bytes()
    assert len(blob) == 2 * 8 * 8 * 4  # 2 sequences x 8 tokens x dim 8 x float32


def test_truncated_blob_raises(tmp_path):
    seqs = generate_sequences(2, 8, make_specs(), seed=1)
    path = write_sequences(seqs, tmp_path, "calib")
    blob = tmp_path / "calib_embeddings.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_sequences(path)


def test_missing_jsonl_raises():
    with pytest.raises(FormatError):
        load_sequences("/nonexistent/calib.jsonl")


def test_generate_sequences_deterministic_and_domain_separated():
    specs = make_specs()
    a = generate_sequences(3, 8, specs, seed=5, domain=0)
    b = generate_sequences(3, 8, specs, seed=5, domain=0)
    c = generate_sequences(3, 8, specs, seed=5, domain=1)
    for sa, sb in zip(a, b):
        assert sa.embeddings.tobytes() == sb.embeddings.tobytes()
    assert a[0].embeddings.tobytes() != c[0].embeddings.tobytes()


def test_generate_sequences_span_layout():
    seqs = generate_sequences(1, 8, make_specs(), seed=0)
    seq = seqs[0]
    assert len(seq) == 8
    assert [s.modality.name for s in seq.spans] == ["visual", "language"]
    assert [s.length for s in seq.spans] == [5, 3]


def test_noisy_scenario_shape_and_determinism():
    a = make_noisy_modality_scenario(2, n_calib=3, n_eval=2)
    b = make_noisy_modality_scenario(2, n_calib=3, n_eval=2)
    assert len(a.calib) == 3 and len(a.eval) == 2
    assert a.calib[0].embeddings.tobytes() == b.calib[0].embeddings.tobytes()
    for la, lb in zip(a.model.iter_layers(), b.model.iter_layers()):
        assert la.weight.tobytes() == lb.weight.tobytes()
    # calibration carries the noise span, eval does not
    assert len(a.calib[0].indices_for("visual")) > 0
    assert len(a.eval[0].indices_for("visual")) == 0
    assert len(a.eval[0].indices_for("language")) == len(a.eval[0])
    # the noise modality is the high-magnitude one
    noise = a.calib[0].embeddings[a.calib[0].indices_for("visual")]
    signal = a.calib[0].embeddings[a.calib[0].indices_for("language")]
    assert np.abs(noise).mean() > 2 * np.abs(signal).mean()


def test_records_without_dim_field_load_via_inference(tmp_path):
    # the minimal record schema omits "dim"; the row width comes from the blob
    seqs = generate_sequences(3, 8, make_specs(), seed=2)
    path = write_sequences(seqs, tmp_path, "calib")
    lines = []
    for line in path.read_text().splitlines():
        record = json.loads(line)
        del record["dim"]
        lines.append(json.dumps(record))
    path.write_text("\n".join(lines) + "\n")
    loaded = load_sequences(path)
    for a, b in zip(seqs, loaded):
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
