"""Cross-check the hand-written network against PyTorch when it is installed.

Same weights, same batch: forward, Smooth L1, backward and three Adam steps
(weight decay on weights only) must agree to float64 rounding.
"""
import numpy as np
import pytest

torch = pytest.importorskip("torch")
tnn = torch.nn

from magtac import nn  # noqa: E402
from magtac.fusion import CBR_SPECS, ForceModel  # noqa: E402


class Reference(tnn.Module):
    def __init__(self, size):
        super().__init__()
        layers = []
        for s in CBR_SPECS:
            layers += [tnn.Conv2d(s.in_channels, s.out_channels, s.kernel, s.stride, s.padding), tnn.BatchNorm2d(s.out_channels), tnn.ReLU()]
        flat = 64 * (size // 8) ** 2
        self.cnn = tnn.Sequential(*layers, tnn.Flatten(), tnn.Linear(flat, 512), tnn.Linear(512, 32))
        self.gru = tnn.GRU(24, 32, 3)
        self.head = tnn.Linear(64, 1)

    def forward(self, img, mag, mean, std):
        _, h = self.gru(((mag - mean) / std).transpose(0, 1))
        return self.head(torch.cat([h[-1], self.cnn(img)], 1))[:, 0]


def _load(ref, model):
    st = {k: torch.tensor(np.asarray(v)) for k, v in model.state().items()}
    with torch.no_grad():
        for j in range(3):
            conv, bn = ref.cnn[3 * j], ref.cnn[3 * j + 1]
            conv.weight.copy_(st[f"cnn.layers.{j}.layers.0.weight"])
            conv.bias.copy_(st[f"cnn.layers.{j}.layers.0.bias"])
            bn.weight.copy_(st[f"cnn.layers.{j}.layers.1.gamma"])
            bn.bias.copy_(st[f"cnn.layers.{j}.layers.1.beta"])
            bn.running_mean.copy_(st[f"cnn.layers.{j}.layers.1.running_mean"])
            bn.running_var.copy_(st[f"cnn.layers.{j}.layers.1.running_var"])
        for a, b in ((4, 10), (5, 11)):
            ref.cnn[b].weight.copy_(st[f"cnn.layers.{a}.weight"])
            ref.cnn[b].bias.copy_(st[f"cnn.layers.{a}.bias"])
        for layer in range(3):
            for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
                getattr(ref.gru, f"{name}_l{layer}").copy_(st[f"gru.layers.{layer}.{name}"])
        ref.head.weight.copy_(st["head.weight"])
        ref.head.bias.copy_(st["head.bias"])
    return st["mag_mean"], st["mag_std"]


def test_training_steps_match_pytorch():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    img = rng.standard_normal((8, 3, 32, 32))
    mag = rng.standard_normal((8, 20, 24))
    y = rng.uniform(0, 1, 8)
    model = ForceModel("fusion", 32, seed=1, dtype=np.float64)
    model.set_mag_normalization(mag)
    ref = Reference(32).double()
    mean, std = _load(ref, model)

    decay = [p for n, p in ref.named_parameters() if n.endswith("weight") and not isinstance(_owner(ref, n), tnn.BatchNorm2d)]
    decay += [p for n, p in ref.named_parameters() if "weight_" in n]
    ids = {id(p) for p in decay}
    rest = [p for p in ref.parameters() if id(p) not in ids]
    assert len(decay) == sum(p.decay for p in model.parameters())
    topt = torch.optim.Adam([{"params": decay, "weight_decay": 1e-4}, {"params": rest, "weight_decay": 0.0}], lr=1e-3)
    opt = nn.Adam(model.parameters(), lr=1e-3, weight_decay=1e-4)
    model.train()
    ref.train()
    for _ in range(3):
        opt.zero_grad()
        pred = model.forward(img, mag)
        loss, grad = nn.smooth_l1_loss(pred, y)
        model.backward(grad)
        opt.step()
        topt.zero_grad()
        tpred = ref(torch.tensor(img), torch.tensor(mag), mean, std)
        tloss = tnn.functional.smooth_l1_loss(tpred, torch.tensor(y))
        tloss.backward()
        topt.step()
        assert loss == pytest.approx(tloss.item(), rel=1e-12)
        np.testing.assert_allclose(pred, tpred.detach().numpy(), rtol=0, atol=1e-12)
    model.eval()
    ref.eval()
    out = ref(torch.tensor(img), torch.tensor(mag), mean, std).detach().numpy()
    np.testing.assert_allclose(model.forward(img, mag), out, rtol=0, atol=1e-8)


def _owner(module, name):
    for part in name.split(".")[:-1]:
        module = module[int(part)] if part.isdigit() else getattr(module, part)
    return module
