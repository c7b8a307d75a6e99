import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mmgrpo import cli
from mmgrpo.config import ConfigError, load_config, parse_config
from mmgrpo.envs import make_builtin_env
from mmgrpo.persistence import (
    LogFormatError,
    append_rows,
    dumps_record,
    read_trajectory_log,
    trajectory_record,
    truncate_rows,
)
from mmgrpo.policy import PolicyBank, load_bank, load_checkpoint, params_equal, save_bank
from mmgrpo.trainer import Trainer, warm_start_bank

GOLDEN = Path(__file__).parent / "golden"


def golden_config():
    return yaml.safe_load((GOLDEN / "chain2.yaml").read_text())


def write_config(path, **train_overrides):
    cfg = golden_config()
    cfg["env"]["params"]["max_output_len"] = 2
    cfg["train"].update(dict(n_steps=6, batch_size=2, rollouts_per_example=6, group_size=6,
                             checkpoint_every=2))
    cfg["train"].update(train_overrides)
    cfg["eval_rollouts"] = 5
    path.write_text(yaml.safe_dump(cfg))
    return path


# -- config ----------------------------------------------------------------------

def test_golden_config_parses():
    cfg = load_config(GOLDEN / "chain2.yaml")
    assert cfg.schema_version == 1
    tc = cfg.train_config()
    assert (tc.n_steps, tc.batch_size, tc.group_size, tc.lr) == (750, 4, 12, 2.0)
    assert tc.rollouts == {"student": 12}


def test_hash_ignores_key_order(tmp_path):
    data = golden_config()

    def reorder(d):
        if isinstance(d, dict):
            return {k: reorder(d[k]) for k in reversed(list(d))}
        return d
    a = tmp_path / "a.yaml"
    b = tmp_path / "b.yaml"
    a.write_text(yaml.safe_dump(data, sort_keys=True))
    b.write_text(yaml.safe_dump(reorder(data), sort_keys=False))
    assert a.read_text() != b.read_text()
    assert load_config(a).config_hash() == load_config(b).config_hash()
    data["seed"] = 8
    assert parse_config(data).config_hash() != load_config(a).config_hash()


def test_missing_group_size_names_field(tmp_path, capsys):
    data = golden_config()
    del data["train"]["group_size"]
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert "train.group_size: required field missing" in err.value.errors

    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(data))
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
    assert "train.group_size" in capsys.readouterr().err


@pytest.mark.parametrize("mutate,needle", [
    (lambda d: d.update(schema_version=2), "schema_version"),
    (lambda d: d["train"].update(group_size=20), "group_size must not exceed"),
    (lambda d: d["objective"].update(clip_eps=1.5), "objective.clip_eps"),
    (lambda d: d["train"].update(bogus=1), "train.bogus"),
])
def test_field_level_diagnostics(mutate, needle):
    data = golden_config()
    mutate(data)
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert needle in str(err.value)


def test_unknown_env_exits_nonzero(tmp_path, capsys):
    data = golden_config()
    data["env"]["name"] = "maze"
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(data))
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
    assert "maze" in capsys.readouterr().err


# -- train -------------------------------------------------------------------------

def test_train_twice_identical_metrics(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--seed", "7",
                         "--out", str(tmp_path / run)]) == 0
    for name in ("metrics.csv", "steps.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert len(a.splitlines()) > 1
    assert params_equal(load_bank(tmp_path / "a" / "bank.npz"), load_bank(tmp_path / "b" / "bank.npz"))
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["env"] == "chain-2"
    assert manifest["finished"] and manifest["started"]
    assert manifest["config_hash"] == load_config(cfg, {"seed": 7}).config_hash()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,module_id,invocation_index,objective,mean_abs_advantage,clip_fraction,mean_kl"


def test_better_together_initialises_from_bank(tmp_path):
    env = make_builtin_env("chain-2", vocab_size=8, max_output_len=2)
    po = warm_start_bank(env, 0.6)
    save_bank(tmp_path / "po.npz", po)
    cfg = write_config(tmp_path / "c.yaml", n_steps=0)
    assert cli.main(["train", "--config", str(cfg), "--stage", "better-together",
                     "--init-bank", str(tmp_path / "po.npz"), "--out", str(tmp_path / "r")]) == 0
    assert params_equal(load_bank(tmp_path / "r" / "bank.npz"), po)
    banks, _ = load_checkpoint(tmp_path / "r" / "checkpoint.npz")
    assert params_equal(banks["reference"], po)

    cfg = write_config(tmp_path / "c2.yaml", n_steps=3)
    assert cli.main(["train", "--config", str(cfg), "--stage", "better-together",
                     "--init-bank", str(tmp_path / "po.npz"), "--out", str(tmp_path / "r2")]) == 0
    banks, _ = load_checkpoint(tmp_path / "r2" / "checkpoint.npz")
    assert params_equal(banks["reference"], po)
    assert not params_equal(banks["current"], po)


def test_better_together_requires_bank(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["train", "--config", str(cfg), "--stage", "better-together",
                     "--out", str(tmp_path / "r")]) == 2
    assert "init_bank" in capsys.readouterr().err


def test_interrupt_then_resume_matches_uninterrupted(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "full")]) == 0

    original = Trainer._one_step
    fired = {"done": False}

    def interrupting(self):
        if self.step == 3 and not fired["done"]:
            fired["done"] = True
            raise KeyboardInterrupt
        return original(self)
    monkeypatch.setattr(Trainer, "_one_step", interrupting)
    out = tmp_path / "cut"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 130
    assert not (out / "bank.npz").exists()
    _, meta = load_checkpoint(out / "checkpoint.npz")
    assert meta["trainer"]["step"] == 3

    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--resume"]) == 0
    for name in ("metrics.csv", "steps.csv"):
        assert (out / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    assert params_equal(load_bank(out / "bank.npz"), load_bank(tmp_path / "full" / "bank.npz"))


def test_resume_refuses_other_config(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", n_steps=2)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    other = write_config(tmp_path / "d.yaml", n_steps=3)
    assert cli.main(["train", "--config", str(other), "--out", str(tmp_path / "r"),
                     "--resume"]) == 2


# -- rollout -------------------------------------------------------------------------

def _bank_file(tmp_path, token=None):
    env = make_builtin_env("chain-2", vocab_size=8, max_output_len=2)
    bank = PolicyBank.for_program(env.program, env.context_vocab)
    if token is not None:
        for pol in bank.groups.values():
            pol.params["logits"][:, token] = 1e6
    path = tmp_path / f"bank{token}.npz"
    save_bank(path, bank)
    return path


def test_rollout_writes_log(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "r.jsonl"
    assert cli.main(["rollout", "--config", str(cfg), "--checkpoint", str(_bank_file(tmp_path)),
                     "-n", "20", "--out", str(out)]) == 0
    trajs = read_trajectory_log(out)
    assert len(trajs) == 20
    assert [t.program_input_id for t in trajs[:8]] == list(range(7)) + [0]
    for t in trajs:
        assert len(t.traces) <= 2
        assert (t.reward is not None) and (t.complete or t.reward == 0.0)


def test_rollout_deterministic_policy(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "r.jsonl"
    assert cli.main(["rollout", "--config", str(cfg), "--checkpoint",
                     str(_bank_file(tmp_path, token=3)), "-n", "5", "--out", str(out)]) == 0
    for t in read_trajectory_log(out):
        assert [tr.output for tr in t.traces] == [(3, 3), (3, 3)]
        assert t.final_output == 3


def test_rollout_seeded_and_refuses_bad_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    bank = _bank_file(tmp_path)
    for name in ("a", "b"):
        cli.main(["rollout", "--config", str(cfg), "--checkpoint", str(bank), "-n", "9",
                  "--seed", "4", "--out", str(tmp_path / f"{name}.jsonl")])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    junk = tmp_path / "junk.npz"
    np.savez(junk, x=np.zeros(3))
    assert cli.main(["rollout", "--config", str(cfg), "--checkpoint", str(junk),
                     "--out", str(tmp_path / "c.jsonl")]) == 2
    assert "junk.npz" in capsys.readouterr().err

    env = make_builtin_env("branch")
    save_bank(tmp_path / "other.npz", PolicyBank.for_program(env.program, env.context_vocab))
    assert cli.main(["rollout", "--config", str(cfg), "--checkpoint", str(tmp_path / "other.npz"),
                     "--out", str(tmp_path / "d.jsonl")]) == 2


# -- inspect-groups ---------------------------------------------------------------------

def test_inspect_three_groups(capsys):
    assert cli.main(["inspect-groups", str(GOLDEN / "three_groups.jsonl"), "--json"]) == 0
    recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    groups = [r for r in recs if not r.get("summary")]
    assert [(g["module"], g["index"]) for g in groups] == [("M1", 0), ("M1", 1), ("M2", 0)]
    assert all(g["size_pre"] == 3 and g["size"] == 3 for g in groups)
    assert all(g["rewards"] == [1.0, 0.0, 0.5] for g in groups)

    assert cli.main(["inspect-groups", str(GOLDEN / "three_groups.jsonl")]) == 0
    text = capsys.readouterr().out
    assert "3 groups before padding" in text and "reward mean 0.5000" in text


def test_inspect_empty_log(tmp_path, capsys):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert cli.main(["inspect-groups", str(empty), "--json"]) == 0
    assert capsys.readouterr().out == ""
    assert cli.main(["inspect-groups", str(empty)]) == 0
    assert "0 groups" in capsys.readouterr().out


def test_inspect_mixed_structure(capsys):
    trajs = read_trajectory_log(GOLDEN / "mixed.jsonl")
    report = cli.inspect_groups(trajs, padding_mode="fill")
    summaries = {r["program_input_id"]: r for r in report if r.get("summary")}
    # q1: A counts {2,1,3}, B counts {1,0,2} -> 3 + 2 groups; q2: one B call
    assert summaries["q1"]["groups_pre_padding"] == 5
    assert summaries["q2"]["groups_pre_padding"] == 1
    q1 = [r for r in report if r.get("program_input_id") == "q1" and not r.get("summary")]
    assert [r["size_pre"] for r in q1] == [3, 2, 1, 2, 1]
    assert all(r["size"] == 3 for r in q1)
    assert [sum(r["padding"]) for r in q1] == [0, 1, 2, 1, 2]
    # the parse-failure rollout carries the fallback reward
    assert q1[0]["rewards"] == [1.0, 0.0, 0.0]

    trunc = cli.inspect_groups(trajs, padding_mode="truncate")
    assert [(r["module"], r["index"]) for r in trunc
            if r.get("program_input_id") == "q1" and not r.get("summary")] == [("A", 0)]
    assert cli.main(["inspect-groups", str(GOLDEN / "mixed.jsonl"), "-G", "2"]) == 0
    assert "size 3 -> 2" in capsys.readouterr().out


def test_inspect_corrupt_line(tmp_path, capsys):
    lines = (GOLDEN / "three_groups.jsonl").read_text().splitlines()
    lines[1] = lines[1][:40]
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert cli.main(["inspect-groups", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "invalid JSON" in err

    rec = json.loads(lines[0])
    rec["status"] = "exploded"
    bad.write_text(json.dumps(rec) + "\n")
    with pytest.raises(LogFormatError) as exc:
        read_trajectory_log(bad)
    assert exc.value.line == 1 and "status" in exc.value.reason


# -- verify ------------------------------------------------------------------------------

def test_verify_pass_and_mutation(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "6/6 oracles passed" in out
    assert all(line.split()[2].endswith("s") for line in out.splitlines()[:-1])
    assert cli.main(["verify", "--quick", "--mutate", "gradient"]) == 1
    assert "FAIL  fd_gradient" in capsys.readouterr().out


# -- persistence -------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["three_groups.jsonl", "mixed.jsonl"])
def test_log_round_trip_byte_identical(name, tmp_path):
    src = GOLDEN / name
    text = "".join(dumps_record(trajectory_record(t)) + "\n" for t in read_trajectory_log(src))
    assert text == src.read_text()


def test_generated_log_round_trip(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "r.jsonl"
    cli.main(["rollout", "--config", str(cfg), "--checkpoint", str(_bank_file(tmp_path)),
              "-n", "30", "--out", str(out)])
    text = "".join(dumps_record(trajectory_record(t)) + "\n" for t in read_trajectory_log(out))
    assert text == out.read_text()


def test_csv_append_and_truncate(tmp_path):
    from mmgrpo.trainer import GroupRow
    rows = [GroupRow(i, "m", 0, 0.1 * i, 1.0, 0.0, 1e-17) for i in range(5)]
    path = tmp_path / "m.csv"
    assert append_rows(path, rows[:3]) == 3
    assert append_rows(path, rows, 3) == 5
    lines = path.read_text().splitlines()
    assert len(lines) == 6 and lines[4].split(",")[3] == repr(0.1 * 3)
    truncate_rows(path, 2)
    assert len(path.read_text().splitlines()) == 3
