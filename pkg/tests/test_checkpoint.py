"""Checkpoint container: bitwise round-trips and corruption rejection."""

import json
import struct

import numpy as np
import pytest
import torch

from viewfix import DataError, FixerConfig, FixerModel, load_checkpoint, save_checkpoint
from viewfix.checkpoint import MAGIC, VERSION, read_config


def tiny_model(seed=0):
    return FixerModel(FixerConfig(scales=2, channels=(4, 6), latent_channels=8,
                                  attn_blocks=1, seed=seed))


def test_model_round_trip_is_bitwise(tmp_path):
    model = tiny_model(seed=5)
    p = tmp_path / "m.ufix"
    save_checkpoint(p, model)
    loaded, train_state = load_checkpoint(p)
    assert train_state is None
    assert loaded.config.as_dict() == model.config.as_dict()
    sa, sb = model.state_dict(), loaded.state_dict()
    assert set(sa) == set(sb)
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k


def test_train_state_round_trip(tmp_path):
    model = tiny_model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = torch.randn(3, 8, 8)
    loss = model.stem(x[None]).square().mean()
    loss.backward()
    opt.step()
    gen = torch.Generator().manual_seed(123)
    torch.rand(4, generator=gen)  # advance so the state is nontrivial
    train_state = {"step": 7, "optimizer": opt.state_dict(), "rng": gen.get_state()}
    p = tmp_path / "t.ufix"
    save_checkpoint(p, model, train_state)
    _, loaded = load_checkpoint(p)
    assert loaded["step"] == 7
    assert torch.equal(loaded["rng"], gen.get_state())
    got_opt = loaded["optimizer"]
    want_opt = opt.state_dict()
    # JSON round-trips tuples (e.g. betas) into lists; Adam only indexes them
    normalize = lambda pg: json.loads(json.dumps(pg))
    assert normalize(got_opt["param_groups"]) == normalize(want_opt["param_groups"])
    assert set(got_opt["state"]) == set(want_opt["state"])
    for idx, slots in want_opt["state"].items():
        for key, value in slots.items():
            if isinstance(value, torch.Tensor):
                assert torch.equal(got_opt["state"][idx][key].to(value.dtype), value)
            else:
                assert got_opt["state"][idx][key] == value


def test_resumed_optimizer_is_loadable(tmp_path):
    model = tiny_model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = model.stem(torch.randn(1, 3, 8, 8)).square().mean()
    loss.backward()
    opt.step()
    p = tmp_path / "r.ufix"
    save_checkpoint(p, model, {"step": 1, "optimizer": opt.state_dict(),
                               "rng": torch.Generator().get_state()})
    model2, state = load_checkpoint(p)
    opt2 = torch.optim.Adam(model2.parameters(), lr=1e-3)
    opt2.load_state_dict(state["optimizer"])  # must not raise
    loss2 = model2.stem(torch.randn(1, 3, 8, 8)).square().mean()
    loss2.backward()
    opt2.step()


def test_read_config_without_tensors(tmp_path):
    model = tiny_model(seed=9)
    p = tmp_path / "c.ufix"
    save_checkpoint(p, model)
    cfg = read_config(p)
    assert cfg.as_dict() == model.config.as_dict()


def test_rejects_bad_magic_version_and_truncation(tmp_path):
    model = tiny_model()
    p = tmp_path / "good.ufix"
    save_checkpoint(p, model)
    raw = p.read_bytes()

    bad = tmp_path / "bad.ufix"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError):
        load_checkpoint(bad)

    bad.write_bytes(MAGIC + struct.pack("<II", VERSION + 1, 0) + raw[12:])
    with pytest.raises(DataError):
        load_checkpoint(bad)

    bad.write_bytes(raw[: len(raw) // 2])  # cut inside the payload
    with pytest.raises(DataError):
        load_checkpoint(bad)

    bad.write_bytes(raw[:8])  # cut inside the header
    with pytest.raises(DataError):
        load_checkpoint(bad)

    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ufix")


def test_rejects_malformed_header_json(tmp_path):
    blob = b"{not json"
    p = tmp_path / "bad.ufix"
    p.write_bytes(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
    with pytest.raises(DataError):
        load_checkpoint(p)
    blob = b"{}"
    p.write_bytes(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
    with pytest.raises(DataError):
        load_checkpoint(p)  # header valid JSON but missing required blocks


def test_save_creates_parent_dirs_and_is_deterministic(tmp_path):
    model = tiny_model(seed=2)
    a = tmp_path / "sub" / "a.ufix"
    b = tmp_path / "sub2" / "b.ufix"
    save_checkpoint(a, model)
    save_checkpoint(b, model)
    assert a.read_bytes() == b.read_bytes()
