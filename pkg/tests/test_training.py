import math

import pytest
import torch

from einet.config import set_value
from einet.errors import ConfigError, LoadError, NumericError
from einet.intensity_mapper import feature_matching, gamma_schedule, loss_im
from einet.model import f0_loss, kl_divergence
from einet.training import (LossReport, Trainer, assemble, discriminator_loss, duration_loss,
                            format_log_line, generator_adv_loss, learning_rate, masked_l1,
                            parse_log_line, read_checkpoint)

from conftest import small_config

ZERO_TERMS = dict.fromkeys(LossReport.GENERATOR_TERMS, 0.0)


def make_trainer(small_corpus, out_dir=None, **over):
    _, man, feats = small_corpus
    cfg = small_config(**over)
    cfg = set_value(cfg, "model.n_symbols", len(man.phoneme_inventory))
    cfg = set_value(cfg, "model.n_speakers", len(man.speakers))
    return Trainer(cfg, man, feats, out_dir=out_dir)


# -- loss algebra -------------------------------------------------------------


def test_eq_sum_of_unit_components():
    terms = {k: torch.tensor(1.0) for k in LossReport.GENERATOR_TERMS}
    terms["l_kl"] = torch.tensor(0.0)
    total, report = assemble(terms)
    assert total.item() == 6.0 and report.total == 6.0


def test_reported_total_is_sum_of_reported_parts():
    g = torch.Generator().manual_seed(0)
    terms = {k: torch.rand((), generator=g) * 50 for k in LossReport.GENERATOR_TERMS}
    total, report = assemble(terms)
    parts = sum(getattr(report, k) for k in LossReport.GENERATOR_TERMS)
    assert abs(parts - report.total) < 1e-9
    assert total.item() == pytest.approx(report.total, rel=1e-6)


def test_assemble_names_missing_and_non_finite_terms():
    terms = {k: torch.tensor(0.0) for k in LossReport.GENERATOR_TERMS}
    del terms["l_dur"]
    with pytest.raises(KeyError, match="l_dur"):
        assemble(terms)
    terms = {k: torch.tensor(0.0) for k in LossReport.GENERATOR_TERMS}
    terms["l_f0"] = torch.tensor(float("nan"))
    with pytest.raises(NumericError, match="l_f0"):
        assemble(terms)


def test_all_components_vanish_at_perfect_reconstruction():
    d = torch.float64
    g = torch.Generator().manual_seed(3)
    mel = torch.randn(2, 80, 6, generator=g, dtype=d)
    mask = torch.ones(2, 1, 6, dtype=d)
    feats = [[torch.randn(2, 4, 9, generator=g, dtype=d)]]
    f0 = torch.full((2, 6), 180.0, dtype=d)
    voiced = torch.ones(2, 6, dtype=d)
    m = torch.randn(2, 4, 6, generator=g, dtype=d)
    logs = torch.zeros(2, 4, 6, dtype=d)
    eps = torch.randn(2, 4, 6, generator=g, dtype=d)
    dur = torch.tensor([[2, 4], [3, 3]])
    logits = torch.tensor([[60.0, -60, -60, -60, -60], [-60, -60, 60.0, -60, -60]], dtype=d)
    terms = {
        "l_cls": masked_l1(mel, mel.clone(), mask),
        "l_fm": feature_matching(feats, [[feats[0][0].clone()]]),
        "l_adv_g": generator_adv_loss([torch.ones(2, 5, dtype=d)]),
        "l_f0": f0_loss(torch.log(f0), torch.full((2, 6), 1e4, dtype=d), f0, voiced),
        "l_dur": duration_loss(torch.log(dur.to(d)), dur, torch.ones(2, 1, 2, dtype=d)),
        "l_im": loss_im(logits, torch.tensor([0, 2]), feats, feats, 200),
        "l_kl": kl_divergence(m + eps, logs, m, logs, mask, torch.zeros(2, dtype=d), eps),
    }
    total, report = assemble(terms)
    for k in LossReport.GENERATOR_TERMS:
        assert abs(getattr(report, k)) < 1e-12, k
    assert abs(report.total - sum(getattr(report, k) for k in LossReport.GENERATOR_TERMS)) < 1e-9


def test_discriminator_loss_examples():
    assert discriminator_loss([torch.ones(4)], [torch.zeros(4)]).item() == 0.0
    assert discriminator_loss([torch.zeros(4)], [torch.ones(4)]).item() == 2.0
    assert discriminator_loss([torch.ones(2), torch.zeros(3)], [torch.zeros(2), torch.zeros(3)]).item() == 1.0


def test_masked_l1_averages_valid_entries():
    a = torch.tensor([[[1.0, 2.0, 9.0]]])
    mask = torch.tensor([[[1.0, 1.0, 0.0]]])
    assert masked_l1(a, torch.zeros_like(a), mask).item() == 1.5


# -- schedule -----------------------------------------------------------------


def test_learning_rate_at_epoch_ten():
    cfg = small_config(optim__lr=2e-4)
    assert abs(learning_rate(cfg, 10) - 2e-4 * 0.999875 ** 10) < 1e-12
    opt = torch.optim.AdamW([torch.nn.Parameter(torch.zeros(1))], lr=2e-4)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, 0.999875)
    for _ in range(10):
        opt.step()
        sched.step()
    assert abs(opt.param_groups[0]["lr"] - 2e-4 * 0.999875 ** 10) < 1e-12


def test_log_line_round_trip():
    line = format_log_line(3, {"l_cls": 0.1 + 0.2, "gamma": 0.99})
    assert parse_log_line(line) == (3, {"l_cls": 0.1 + 0.2, "gamma": 0.99})


# -- trainer ------------------------------------------------------------------


def test_one_generator_step_descends(small_corpus, small_batch):
    tr = make_trainer(small_corpus, optim__lr=2e-4, model__dropout=0.0)
    seg = tr.cfg.data.segment_frames

    def total():
        out = tr.model(small_batch, seg, generator=torch.Generator().manual_seed(0))
        return assemble(tr.generator_terms(small_batch, out, 0))[0]

    before = total()
    tr.opt_g.zero_grad()
    before.backward()
    tr.opt_g.step()
    with torch.no_grad():
        after = total()
    assert after.item() < before.item()


def test_discriminator_gradient_spot_check(small_corpus, small_batch):
    tr = make_trainer(small_corpus)
    disc = tr.disc.double()
    real = small_batch.audio[:, :512].double()
    fake = torch.randn(2, 512, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) * 0.1
    loss = lambda: discriminator_loss(disc(real)[0], disc(fake)[0])
    params = [p for p in disc.parameters()][:3]
    loss().backward()
    h = 1e-6
    for p in params:
        idx = (0,) * p.dim()
        with torch.no_grad():
            p[idx] += h
            up = loss().item()
            p[idx] -= 2 * h
            dn = loss().item()
            p[idx] += h
        fd = (up - dn) / (2 * h)
        assert math.isfinite(p.grad[idx].item())
        assert p.grad[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_epoch_logs_every_component_and_schedule(small_corpus, tmp_path):
    tr = make_trainer(small_corpus, tmp_path)
    tr.fit(1, log_path=tmp_path / "metrics.log")
    epoch, metrics = parse_log_line((tmp_path / "metrics.log").read_text().splitlines()[0])
    assert epoch == 0
    for name in LossReport.GENERATOR_TERMS + ("total", "l_adv_d", "gamma", "beta", "lr", "val_l_cls"):
        assert math.isfinite(metrics[name]), name
    assert (metrics["gamma"], metrics["beta"]) == gamma_schedule(0)
    ck = read_checkpoint(tmp_path / "epoch_0001.pt")
    assert ck["epoch"] == 1 and set(ck["optim"]) == {"generator", "discriminator"}
    assert "torch" in ck["rng"] and ck["log"] == tr.log_lines


def test_resume_reproduces_uninterrupted_log(small_corpus, tmp_path):
    a = make_trainer(small_corpus, tmp_path / "a")
    a.fit(2)
    b = make_trainer(small_corpus, tmp_path / "b")
    b.fit(1)
    c = make_trainer(small_corpus, tmp_path / "c")
    c.resume(tmp_path / "b" / "epoch_0001.pt")
    c.fit(2)
    assert c.log_lines == a.log_lines
    for (n, p), q in zip(a.model.named_parameters(), c.model.parameters()):
        assert torch.equal(p, q), n


def test_resume_refuses_changed_config(small_corpus, tmp_path):
    a = make_trainer(small_corpus, tmp_path / "a")
    a.save(tmp_path / "a" / "x.pt")
    b = make_trainer(small_corpus, tmp_path / "b", loss__kl_weight=0.5)
    with pytest.raises(ConfigError, match="loss.kl_weight: 1.0 != 0.5"):
        b.resume(tmp_path / "a" / "x.pt")


def test_unwritable_checkpoint_dir_fails_at_startup(small_corpus, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ConfigError, match="not writable"):
        make_trainer(small_corpus, blocker / "sub")


def test_foreign_checkpoint_rejected(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(LoadError):
        read_checkpoint(tmp_path / "x.pt")
    (tmp_path / "y.pt").write_bytes(b"garbage")
    with pytest.raises(LoadError):
        read_checkpoint(tmp_path / "y.pt")
