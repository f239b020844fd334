import numpy as np
import pytest
import torch

from lldif.config import ModelConfig, desk_profile
from lldif.data import synth_toy_dataset


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        image_size=8,
        n_classes=3,
        embed_dim=8,
        clip_width=4,
        clip_depth=3,
        text_width=8,
        epd_dim=8,
        pnet_s1_layers=1,
        pnet_s1_heads=2,
        pnet_s1_token_dim=4,
        pnet_s2_width=4,
        pnet_s2_blocks=1,
        channels=(4, 8),
        window_size=2,
        dlnet_heads=2,
        fusion_dim=8,
        fusion_heads=2,
        fusion_grid=2,
        ce_reduction="mean",
    )
    base.update(kw)
    return ModelConfig(**base)


def central_diff_rel_err(fn, tensors, n_coords=None, eps=1e-6, seed=0):
    """Max relative error between autograd and central differences.

    ``fn`` maps the list ``tensors`` (float64, requires_grad) to a scalar.
    ``n_coords`` limits the check to that many random coordinates per tensor.
    """
    loss = fn(tensors)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, g in zip(tensors, grads):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().view(-1)
        idx = np.arange(flat.numel())
        if n_coords is not None and n_coords < len(idx):
            idx = rng.choice(idx, n_coords, replace=False)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = fn(tensors).item()
                flat[i] = old - eps
                down = fn(tensors).item()
                flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[i].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def toy_samples():
    return synth_toy_dataset(2, 32, 32, 7)[0]


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_profile(2)


@pytest.fixture
def tiny_batch():
    def make(cfg: ModelConfig, n: int = 4, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        images = torch.rand(n, 3, cfg.image_size, cfg.image_size, generator=g)
        landmarks = torch.rand(n, cfg.n_landmarks, cfg.image_size, cfg.image_size, generator=g)
        labels = torch.arange(n) % cfg.n_classes
        return images, landmarks, labels

    return make


def tiny_train_config(stage: int = 1, **kw):
    from lldif.config import TrainConfig

    base = dict(stage=stage, epochs=1, batch_size=4, lr=1e-3, seed=0, model=tiny_config(n_classes=2))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_samples():
    train = synth_toy_dataset(2, 4, 8, 1, window_size=2)[0]
    test = synth_toy_dataset(2, 2, 8, 2, window_size=2, split="test")[0]
    return train, test


@pytest.fixture(scope="session")
def tiny_checkpoints(tiny_samples, tmp_path_factory):
    from lldif.training import train_stage1, train_stage2

    d = tmp_path_factory.mktemp("ckpt")
    train, _ = tiny_samples
    train_stage1(tiny_train_config(1, epochs=2), train, out_path=d / "s1.npz")
    train_stage2(tiny_train_config(2, epochs=2), train, d / "s1.npz", out_path=d / "s2.npz")
    return d / "s1.npz", d / "s2.npz"


ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
