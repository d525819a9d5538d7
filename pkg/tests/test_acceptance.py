"""Acceptance suite: one test per numbered criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest).
"""
import itertools
import math
import random
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import central_diff, rel_err
from foodseg.dataset import generate_toy_dataset, load_folder_tensor
from foodseg.dcn import dcn_v3
from foodseg.evaluation import ConfusionMatrix, miou
from foodseg.mim import mim_loss, pretrain, pretrain_config, sample_mask
from foodseg.optim import AdamWState, adamw_step
from foodseg.train import finetune, preset
from foodseg.vit import Attention, Mlp
from foodseg.vqkd import (
    codebook_usage, quantize, token_iou, tokenize_image, tokenizer_config, train_tokenizer,
)

criterion = pytest.mark.criterion


def _report(number, ok, detail=""):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


# 1 ------------------------------------------------------------------------

@criterion(1, "quantizer matches exhaustive nearest-neighbour search")
def test_c01_quantizer_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for k in (8, 32, 256):
        embed = rng.standard_normal((k, 32))
        embed /= np.linalg.norm(embed, axis=1, keepdims=True)
        x = rng.standard_normal((1000, 32))
        codes, _ = quantize(torch.from_numpy(x), torch.from_numpy(embed))
        unit = x / np.linalg.norm(x, axis=1, keepdims=True)
        dist = ((unit[:, None, :] - embed[None, :, :]) ** 2).sum(-1)
        oracle = dist.argmin(1)  # first minimum on ties
        assert np.array_equal(codes.numpy(), oracle), k
    elapsed = time.perf_counter() - start
    _report(1, elapsed < 10, f"{elapsed:.2f}s")
    assert elapsed < 10


# 2 ------------------------------------------------------------------------

@criterion(2, "token IoU properties and hand case")
def test_c02_token_iou():
    assert token_iou({3, 7, 9}, {7, 9, 12, 15}) == 0.4
    rnd = random.Random(0)
    for _ in range(2000):
        a = {rnd.randrange(64) for _ in range(rnd.randint(1, 20))}
        b = {rnd.randrange(64) for _ in range(rnd.randint(1, 20))}
        v = token_iou(a, b)
        assert v == token_iou(b, a)
        assert 0.0 <= v <= 1.0
        assert token_iou(a, set(a)) == 1.0
        disjoint = {x + 100 for x in b}
        assert token_iou(a, disjoint) == 0.0
    _report(2, True)


# 3 ------------------------------------------------------------------------

def _dense_reference(x, gw, gb, ow, ob):
    b, h, w, c = x.shape
    g, _, cg = gw.shape
    mean = F.unfold(x.permute(0, 3, 1, 2), 3, padding=1).view(b, c, 9, h, w).mean(2).permute(0, 2, 3, 1)
    y = torch.cat([mean[..., i * cg:(i + 1) * cg] @ gw[i].t() for i in range(g)], -1) + gb
    return y @ ow.t() + ob


@criterion(3, "DCN-v3 dense equivalence and gradient checks")
def test_c03_dcn():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    dt = torch.float64
    for _ in range(5):
        x = torch.randn(1, 6, 6, 8, generator=g, dtype=dt)
        gw = torch.randn(2, 4, 4, generator=g, dtype=dt)
        gb, ob = torch.randn(8, generator=g, dtype=dt), torch.randn(8, generator=g, dtype=dt)
        ow = torch.randn(8, 8, generator=g, dtype=dt)
        zero = torch.zeros(1, 6, 6, 2, 9, 2, dtype=dt)
        logits = torch.full((1, 6, 6, 2, 9), torch.randn(1, generator=g).item(), dtype=dt)
        err = (dcn_v3(x, zero, logits, gw, gb, ow, ob) - _dense_reference(x, gw, gb, ow, ob)).abs().max()
        assert err < 1e-5

    frac = torch.rand(1, 6, 6, 2, 9, 2, generator=g, dtype=dt) * 0.7 + 0.15
    offset = frac - torch.randint(0, 2, frac.shape, generator=g).to(dt)
    logits = torch.randn(1, 6, 6, 2, 9, generator=g, dtype=dt)
    target = torch.randn(1, 6, 6, 8, generator=g, dtype=dt)
    args = {"x": x, "offset": offset, "logits": logits, "gw": gw}
    worst = 0.0
    for name in args:
        def loss():
            return (dcn_v3(args["x"], args["offset"], args["logits"], args["gw"], gb, ow, ob) * target).sum()
        args[name].requires_grad_(True)
        loss().backward()
        analytic = args[name].grad.clone()
        args[name].grad = None
        args[name].requires_grad_(False)
        worst = max(worst, rel_err(analytic, central_diff(loss, args[name])))
    elapsed = time.perf_counter() - start
    _report(3, worst < 1e-3 and elapsed < 60, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 60


# 4 ------------------------------------------------------------------------

def _input_grad_err(module, x):
    module = module.double()
    x = x.double()
    target = torch.randn_like(x)
    xr = x.clone().requires_grad_(True)
    (module(xr) * target).sum().backward()
    with torch.no_grad():
        numeric = central_diff(lambda: (module(x) * target).sum(), x)
    return rel_err(xr.grad, numeric)


@criterion(4, "attention / MLP / LayerNorm gradients and softmax rows")
def test_c04_transformer_grads():
    torch.manual_seed(0)
    ln = torch.nn.LayerNorm(8, eps=1e-6)
    with torch.no_grad():
        ln.weight.normal_()
        ln.bias.normal_()
    errs = [_input_grad_err(m, torch.randn(1, 4, 8)) for m in (Attention(8, 2), Mlp(8, 32), ln)]
    attn = Attention(16, 4)
    rows = attn.attention_weights(torch.randn(4, 10, 16) * 4).sum(-1)
    dev = (rows - 1).abs().max().item()
    _report(4, max(errs) < 1e-3 and dev < 1e-6, f"max rel err {max(errs):.2e}, row dev {dev:.1e}")
    assert max(errs) < 1e-3
    assert dev < 1e-6


# 5 ------------------------------------------------------------------------

@criterion(5, "masking count and binomial marginals")
def test_c05_masking():
    g = torch.Generator().manual_seed(0)
    n, r, draws = 196, 0.4, 10_000
    flags = torch.stack([sample_mask(n, r, g).flags for _ in range(draws)])
    assert (flags.sum(1) == 78).all()
    freq = flags.double().mean(0)
    sigma = math.sqrt(r * (1 - r) / draws)
    z = ((freq - r) / sigma).abs().max().item()
    _report(5, z <= 3, f"max |z| {z:.2f}")
    assert z <= 3


# 6 ------------------------------------------------------------------------

@criterion(6, "MIM loss analytics and locality")
def test_c06_mim_loss():
    loss = mim_loss(torch.zeros(2, 5, 8192), torch.randint(8192, (2, 5)), torch.ones(2, 5, dtype=torch.bool))
    assert abs(loss.item() - 9.0109) < 1e-3
    logits = torch.randn(2, 12, 50, requires_grad=True)
    mask = torch.rand(2, 12) < 0.5
    mask[0, 0] = True
    mim_loss(logits, torch.randint(50, (2, 12)), mask).backward()
    assert torch.count_nonzero(logits.grad[~mask]) == 0
    _report(6, True, f"uniform loss {loss.item():.4f}")


# 7 ------------------------------------------------------------------------

@criterion(7, "AdamW closed-form oracle and decoupled decay")
def test_c07_adamw():
    rnd = random.Random(7)
    lr, (b1, b2), eps, wd = 1e-2, (0.9, 0.999), 1e-8, 0.05
    theta_ref, m, v = 0.3, 0.0, 0.0
    p = torch.tensor([0.3], dtype=torch.float64)
    st = AdamWState(torch.zeros_like(p), torch.zeros_like(p))
    worst = 0.0
    for t in range(1, 101):
        g = rnd.gauss(0, 1)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta_ref -= lr * ((m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) + wd * theta_ref)
        adamw_step(p, torch.tensor([g], dtype=torch.float64), st, lr, (b1, b2), eps, wd)
        worst = max(worst, abs(p.item() - theta_ref))
    q = torch.tensor([2.0], dtype=torch.float64)
    sq = AdamWState(torch.zeros_like(q), torch.zeros_like(q))
    adamw_step(q, torch.zeros(1, dtype=torch.float64), sq, 3e-5, (0.9, 0.999), 1e-8, 0.05)
    shrink = q.item() / 2.0
    _report(7, worst < 1e-12, f"max abs dev {worst:.1e}, shrink {shrink!r}")
    assert worst < 1e-12
    assert shrink == pytest.approx(1 - 3e-5 * 0.05, rel=1e-15)


# 8 ------------------------------------------------------------------------

@criterion(8, "mIoU oracle, relabeling invariance and additivity")
def test_c08_miou():
    assert miou(ConfusionMatrix(2, np.array([[3, 1], [1, 3]]))).miou == 0.6
    rng = np.random.default_rng(8)
    c = 7
    gt = rng.integers(0, c, (40, 40))
    pred = np.where(rng.random((40, 40)) < 0.7, gt, rng.integers(0, c, (40, 40)))
    base = miou(ConfusionMatrix(c).update(pred, gt)).miou
    for _ in range(100):
        perm = rng.permutation(c)
        assert miou(ConfusionMatrix(c).update(perm[pred], perm[gt])).miou == pytest.approx(base, abs=1e-15)
    for cut in range(0, 41, 5):
        halves = ConfusionMatrix(c).update(pred[:cut], gt[:cut]) + ConfusionMatrix(c).update(pred[cut:], gt[cut:])
        assert halves == ConfusionMatrix(c).update(pred, gt)
    _report(8, True)


# 9, 10 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    return generate_toy_dataset(tmp_path_factory.mktemp("overfit"), seed=1, n_images=8, n_classes=5, size=64)


def _overfit(name, manifest):
    start = time.perf_counter()
    res = finetune(preset(name), manifest, manifest, log_every=0)
    return res, time.perf_counter() - start


@pytest.mark.slow
@criterion(9, "toy overfit, ViT path")
def test_c09_overfit_vit(overfit_data):
    res, elapsed = _overfit("toy_vit", overfit_data)
    ok = res.best_miou >= 0.90 and elapsed < 15 * 60
    _report(9, ok, f"train mIoU {res.best_miou:.4f} @ {res.best_iteration}, {elapsed:.0f}s")
    assert res.best_miou >= 0.90
    assert elapsed < 15 * 60


@pytest.mark.slow
@criterion(10, "toy overfit, DCN path")
def test_c10_overfit_dcn(overfit_data):
    res, elapsed = _overfit("toy_dcn", overfit_data)
    ok = res.best_miou >= 0.90 and elapsed < 15 * 60
    _report(10, ok, f"train mIoU {res.best_miou:.4f} @ {res.best_iteration}, {elapsed:.0f}s")
    assert res.best_miou >= 0.90
    assert elapsed < 15 * 60


# 11, 12 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_tokenizer(toy_folder):
    _, items = toy_folder
    images = load_folder_tensor([p for p, _ in items], 32)
    norms = []

    def track(trainer, _):
        norms.append((trainer.tokenizer.codebook.embed.norm(dim=1) - 1).abs().max().item())

    trainer, history = train_tokenizer(tokenizer_config("toy"), images, log_every=0, callback=track)
    return trainer.tokenizer, history, norms, images, [label for _, label in items]


@pytest.mark.slow
@criterion(11, "VQ-KD training smoke")
def test_c11_tokenizer_training(trained_tokenizer):
    tok, history, norms, images, _ = trained_tokenizer
    losses = [h["loss"] for h in history]
    early, late = np.mean(losses[:10]), np.mean(losses[-10:])
    usage = codebook_usage(tok, images)
    ok = late <= 0.5 * early and usage >= 0.2 and max(norms) < 1e-6
    _report(11, ok, f"loss {early:.3f} -> {late:.3f}, usage {usage:.2f}, norm dev {max(norms):.1e}")
    assert len(history) == 500 and tok.codebook.num_codes == 64
    assert late <= 0.5 * early
    assert usage >= 0.2
    assert max(norms) < 1e-6


@pytest.mark.slow
@criterion(12, "within-class token IoU exceeds cross-class")
def test_c12_token_semantics(trained_tokenizer):
    tok, _, _, images, labels = trained_tokenizer
    seqs = [tokenize_image(tok, im) for im in images]
    within, cross = [], []
    for i, j in itertools.combinations(range(len(seqs)), 2):
        (within if labels[i] == labels[j] else cross).append(token_iou(seqs[i], seqs[j]))
    w, c = float(np.mean(within)), float(np.mean(cross))
    _report(12, w > c, f"within {w:.3f} vs cross {c:.3f}")
    assert w > c


# 13 -----------------------------------------------------------------------

@pytest.mark.slow
@criterion(13, "identical seeded runs give identical logs through iteration 100")
def test_c13_reproducibility(tmp_path, toy_folder, overfit_data):
    _, items = toy_folder
    images = load_folder_tensor([p for p, _ in items], 32)
    logs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        trainer, _ = train_tokenizer(tokenizer_config("toy", steps=100), images, out / "tok", log_every=0)
        pretrain(pretrain_config("toy", steps=100), trainer.tokenizer, images, out / "mim", log_every=0)
        for name in ("toy_vit", "toy_dcn"):
            finetune(preset(name), overfit_data, None, out / name, iterations=100, log_every=0)
        logs[run] = {p.relative_to(out).as_posix(): p.read_text()
                     for p in sorted(out.rglob("*.csv"))}
    assert sorted(logs["a"]) == ["mim/pretrain_log.csv", "tok/tokenizer_log.csv",
                                 "toy_dcn/metrics.csv", "toy_vit/metrics.csv"]
    same = logs["a"] == logs["b"]
    _report(13, same, f"{len(logs['a'])} logs compared")
    for key in logs["a"]:
        assert len(logs["a"][key].splitlines()) == 101
        assert logs["a"][key] == logs["b"][key], key
