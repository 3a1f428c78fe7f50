"""Contract tests: datasets emitted by the adapter are exactly what the
reconstruction engine ingests, bit for bit where the format allows."""

from __future__ import annotations

import shutil
import warnings

import numpy as np
import pytest

from prior_adapter import (BackendUnavailable, FrameCountMismatch, extract,
                           get_backend)
from prior_adapter import gft

from splat4d import cli
from splat4d.dataset import load_sequence
from splat4d.oracle import OracleSpec, generate
from splat4d.tensors import load_tensor, save_tensor

SPEC = OracleSpec(kind="blobs", frames=3, n_objects=0, n_static=2,
                  camera="track", cam_step=0.05, height=32, width=48,
                  focal=40.0, seed=21)


@pytest.fixture(scope="module")
def oracle_ds(tmp_path_factory):
    return generate(SPEC, tmp_path_factory.mktemp("src") / "ds")


@pytest.fixture(scope="module")
def emitted(oracle_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("adapter") / "ds"
    return extract(oracle_ds, out)


def test_passthrough_dataset_reconstructs_end_to_end(emitted, tmp_path,
                                                     capsys):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        seq = load_sequence(emitted)
    assert caught == []
    assert seq.n_frames == SPEC.frames

    run = tmp_path / "run"
    rc = cli.main(["reconstruct", "--data", str(emitted), "--out", str(run),
                   "--n_ini", "150", "--iters_first", "20",
                   "--densify_steps_first", "8", "--iters_cam", "6",
                   "--iters_gauss", "8", "--densify_steps", "4",
                   "--err_threshold", "0.08", "--seed", "12"])
    assert rc == 0
    checkpoints = sorted(run.glob("frame_*.gfs"))
    assert len(checkpoints) == SPEC.frames
    with capsys.disabled():
        print("\n[SECONDARY] adapter round trip: PASS (loader clean, "
              f"reconstruct wrote {len(checkpoints)} checkpoints)")


def test_every_gft_round_trips_bit_exactly(oracle_ds, emitted):
    src_files = sorted(oracle_ds.glob("*/*.gft"))
    out_files = sorted(emitted.glob("*/*.gft"))
    assert [p.relative_to(emitted) for p in out_files] == \
           [p.relative_to(oracle_ds) for p in src_files]
    for src, out in zip(src_files, out_files):
        assert out.read_bytes() == src.read_bytes()
        arr = load_tensor(out)           # engine-side reader
        assert np.array_equal(arr, gft.load_tensor(out))
        back = out.parent / (out.stem + ".rt")
        save_tensor(back, arr)           # engine-side writer
        assert back.read_bytes() == out.read_bytes()
        back.unlink()


def test_frames_and_intrinsics_copied_exactly(oracle_ds, emitted):
    for src in sorted((oracle_ds / "frames").glob("*.png")):
        assert (emitted / "frames" / src.name).read_bytes() == \
               src.read_bytes()
    src_k = [l for l in (oracle_ds / "intrinsics.txt").read_text().split("\n")
             if l and not l.startswith("#")]
    out_k = [l for l in (emitted / "intrinsics.txt").read_text().split("\n")
             if l and not l.startswith("#")]
    assert [float(v) for v in out_k[0].split()] == \
           [float(v) for v in src_k[0].split()]


def test_missing_mid_sequence_backward_flow_raises(oracle_ds, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(oracle_ds, broken)
    (broken / "flow_bwd" / "flow_0001.gft").unlink()
    with pytest.raises(FrameCountMismatch):
        extract(broken, tmp_path / "out")


def test_unknown_backend_raises(oracle_ds, tmp_path):
    with pytest.raises(BackendUnavailable):
        extract(oracle_ds, tmp_path / "out", depth_backend="mystery-model")
    with pytest.raises(BackendUnavailable):
        get_backend("passthrough", tmp_path / "nowhere")
