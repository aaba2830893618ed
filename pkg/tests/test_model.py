import numpy as np
import pytest
import torch

from dips.errors import CheckpointError, InvalidInputError, InvalidParameterError
from dips.losses import partial_cross_entropy
from dips.model import ModelConfig, UNet, load_checkpoint, localize, read_checkpoint, save_checkpoint
from dips.sampling import BG, FG, IGNORE

SMALL = ModelConfig(encoder_depth=2, base_channels=4, max_channels=8, input_size=(16, 16))


def test_output_is_pixelwise_distribution():
    model = UNet(SMALL).eval()
    out = model(torch.rand(2, 3, 16, 16))
    assert out.shape == (2, 2, 16, 16)
    assert torch.allclose(out.sum(1), torch.ones(2, 16, 16))
    m = localize(model, np.random.default_rng(0).random((16, 16, 3)))
    assert m.fg.shape == (16, 16) and np.allclose(m.fg + m.bg, 1)
    assert m.stacked.shape == (16, 16, 2)


def test_init_is_seeded():
    a, b = UNet(SMALL), UNet(SMALL)
    c = UNet(ModelConfig(2, 4, 8, (16, 16), True, init_seed=1))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_bad_shapes():
    with pytest.raises(InvalidInputError):
        UNet(SMALL)(torch.rand(1, 3, 20, 16))
    with pytest.raises(InvalidInputError):
        localize(UNet(SMALL), np.zeros((16, 16)))
    with pytest.raises(InvalidParameterError):
        ModelConfig(encoder_depth=3, input_size=(20, 20))


def test_checkpoint_round_trip(tmp_path):
    model = UNet(SMALL)
    opt = torch.optim.Adam(model.parameters())
    save_checkpoint(tmp_path / "m.pt", model, opt, epoch=3, extra={"note": 1})
    loaded, payload = load_checkpoint(tmp_path / "m.pt", SMALL)
    x = torch.rand(1, 3, 16, 16)
    model.eval()
    assert torch.equal(model(x), loaded(x))
    assert payload["epoch"] == 3 and payload["extra"] == {"note": 1}
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.pt", ModelConfig(2, 8, 8, (16, 16)))
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "other.pt")


def test_overfits_one_image():
    torch.manual_seed(0)
    model = UNet(SMALL)
    img = torch.rand(1, 3, 16, 16)
    labels = torch.full((1, 16, 16), IGNORE)
    labels[0, 4:8, 4:8] = FG
    labels[0, 12:, :] = BG
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    first = None
    for _ in range(200):
        loss = partial_cross_entropy(model(img), labels)
        first = loss.item() if first is None else first
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() <= first / 10
