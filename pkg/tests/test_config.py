import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatlab.config import (OUTPUT_ROOT_ENV, ConfigError, default_config, load_config, parse_config, parse_real,
                           render_config)


def test_defaults_are_the_fgsm_law_bundle():
    cfg = default_config()
    t = cfg.train
    assert t.attack.epsilon == 8 / 255 and t.attack.init_scheme == "bernoulli_half"
    assert (t.regularizer.kind, t.regularizer.lam, t.regularizer.placement) == ("lipschitz", 12.0, "min_only")
    assert (t.wa.kind, t.wa.threshold, t.wa.gate) == ("auto_ema", 0.82, "le")
    assert t.augment.kind == "cutout"
    assert (t.epochs, t.batch_size, t.lr_schedule.base, t.lr_schedule.milestones) == (110, 128, 0.1, (100, 105))
    text = render_config(cfg)
    for line in ("lambda = 12.0", "threshold = 0.82", f"epsilon = {8 / 255!r}"):
        assert line in text


def test_fraction_values():
    assert parse_real("8/255") == 8 / 255
    assert parse_real(" 0.25 ") == 0.25
    cfg = parse_config("[attack]\nepsilon = 16/255\n")
    assert cfg.train.attack.epsilon == 16 / 255


def test_resolved_config_round_trips():
    cfg = parse_config("[model]\nhidden_dims = 32\n[schedule]\nkind = cyclic\nmax_lr = 0.2\n"
                       "[sweep]\neps_list = 1/255, 4/255\n[averaging]\nkind = none\n")
    text = render_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert render_config(again) == text


@pytest.mark.parametrize("text, needle", [
    ("[train]\nepochs = 3\nepoch = 4\n", ":3: unknown key 'epoch'"),
    ("\n[trian]\nepochs = 3\n", ":2: unknown section"),
    ("[attack]\ninit_scheme = gaussian\n", ":2:"),
    ("[train]\nepochs = three\n", ":2:"),
    ("[regularizer]\nlambda = -1\n", "lambda"),
    ("[train\n", "x.ini"),
])
def test_errors_name_the_line(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.ini")
    assert needle in str(info.value)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.ini"):
        load_config(tmp_path / "nope.ini")


def test_relative_paths_resolve_against_the_config(tmp_path):
    (tmp_path / "cfg.ini").write_text("[data]\nsource = idx\nimages = d/i.idx\nlabels = d/l.idx\n")
    cfg = load_config(tmp_path / "cfg.ini")
    assert cfg.data.images == str(tmp_path / "d" / "i.idx")


def test_output_root_override(monkeypatch, tmp_path):
    cfg = parse_config("[output]\ndir = runs/x\n")
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(cfg.output_path()) == "runs/x"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.output_path() == tmp_path / "runs" / "x"


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.integers(1, 1024), st.floats(0.0, 1.0), st.sampled_from(["le", "gt"]),
       st.lists(st.integers(1, 64), max_size=3))
def test_round_trip_property(epochs, batch, eps, gate, hidden):
    text = (f"[train]\nepochs = {epochs}\nbatch_size = {batch}\n[attack]\nepsilon = {eps!r}\n"
            f"[averaging]\ngate = {gate}\n[model]\nhidden_dims = {', '.join(map(str, hidden))}\n")
    cfg = parse_config(text)
    assert parse_config(render_config(cfg)) == cfg
