from dataclasses import replace

import numpy as np
import pytest

from builders import TINY_TRAIN
from coattn_affect.config import TrainConfig
from coattn_affect.data import load_trials, read_manifest
from coattn_affect.errors import EmptyFold
from coattn_affect.fileio import read_checkpoint
from coattn_affect.folds import FoldPlan, make_folds
from coattn_affect.optim import AdamW
from coattn_affect.nn import Parameter
from coattn_affect.train import FoldTrainer, Validation, train_fold
from oracles import reference_lr_trace


@pytest.fixture(scope="module")
def corpus(tiny_corpus):
    rows = read_manifest(tiny_corpus.manifest_path)
    return load_trials(tiny_corpus.manifest_path), make_folds(rows, 0)


class ScriptedTrainer(FoldTrainer):
    """Skips optimization and reports scripted validation scores."""

    def __init__(self, *args, scores, skip_training=True, **kwargs):
        super().__init__(*args, **kwargs)
        self.scores = list(scores)
        self.skip_training = skip_training
        self.lrs = []
        self.validated = []

    def train_epoch(self):
        if self.skip_training:
            self.optimizer.lr = self.state.current_lr
            loss = 0.0
        else:
            loss = super().train_epoch()
        self.lrs.append(self.optimizer.lr)
        return loss

    def validate(self):
        self.validated.append(self.model.state_dict())
        s = self.scores.pop(0)
        return Validation(s, s, s)


def scores_for(flags):
    """Validation scores whose improvement pattern reproduces ``flags``."""
    best, out = -1.0, []
    for f in flags:
        if f:
            best += 0.001
            out.append(best)
        else:
            out.append(best - 0.5)
    return out


class TestTraining:
    def test_runs_and_best_is_monotone(self, corpus, tmp_path):
        trials, plan = corpus
        result = train_fold(trials, plan, 0, TINY_TRAIN, tmp_path)
        bests = [r["best_val_ccc"] for r in result.log]
        assert bests == sorted(bests)
        assert result.best_val_ccc == max(r["val_ccc"] for r in result.log)
        assert (tmp_path / "best.afwt").is_file() and (tmp_path / "log.jsonl").is_file()
        assert np.isfinite(result.log[-1]["train_loss"])

    def test_deterministic(self, corpus):
        trials, plan = corpus
        cfg = replace(TINY_TRAIN, max_epochs=2)
        a, b = train_fold(trials, plan, 1, cfg), train_fold(trials, plan, 1, cfg)
        assert a.log == b.log
        assert all(np.array_equal(a.best_state[k], b.best_state[k]) for k in a.best_state)

    def test_loss_decreases_on_clean_signal(self, corpus):
        trials, plan = corpus
        result = train_fold(trials, plan, 0, replace(TINY_TRAIN, max_epochs=4, early_stop_patience=10,
                                                      plateau_patience=10))
        assert result.log[-1]["train_loss"] < result.log[0]["train_loss"]

    def test_worse_epoch_restores_best_weights(self, corpus, tmp_path):
        trials, plan = corpus
        trainer = ScriptedTrainer(trials, plan, 0, TINY_TRAIN, tmp_path, scores=[0.5, 0.2, 0.3],
                                  skip_training=False)
        starts = {}
        trainer.hooks.append(lambda t, epoch: starts.setdefault(epoch, t.model.state_dict()))
        saved = {}
        trainer.hooks.append(lambda t, epoch: epoch == 2 and saved.update(read_checkpoint(tmp_path / "best.afwt")))
        trainer.run()
        # epoch 2 trained away from the best, then scored worse; epoch 3 must start from the best again
        assert any(not np.array_equal(trainer.validated[1][k], saved[k]) for k in saved)
        for name, value in saved.items():
            assert np.array_equal(starts[3][name], value)
            assert np.array_equal(starts[2][name], value)

    def test_ten_stalls_stop_early(self, corpus):
        trials, plan = corpus
        cfg = replace(TrainConfig(), model=TINY_TRAIN.model, window_len=20, hop=10)
        trainer = ScriptedTrainer(trials, plan, 0, cfg, scores=[0.1] * 100)
        result = trainer.run()
        assert result.stop_reason == "early_stop"
        assert len(result.log) == cfg.warmup_epochs + 10
        assert "stop:early_stop" in result.log[-1]["events"]

    def test_unfreezing_only_grows(self, corpus):
        trials, plan = corpus
        cfg = replace(TINY_TRAIN, max_epochs=40, early_stop_patience=50, plateau_patience=1, warmup_epochs=1)
        trainer = ScriptedTrainer(trials, plan, 0, cfg, scores=scores_for([True] + [False] * 39))
        seen = []
        trainer.hooks.append(lambda t, epoch: seen.append(set(t.model.trainable_names())))
        result = trainer.run()
        assert result.stop_reason == "schedule_exhausted"
        assert all(a <= b for a, b in zip(seen, seen[1:]))
        assert any(n.startswith("backbone.stage3") for n in seen[-1])
        assert any(n.startswith("backbone.stage2") for n in seen[-1])
        assert not any(n.startswith("backbone.stage1") for n in seen[-1])
        assert not any(n.startswith("backbone.stage") for n in seen[0])

    @pytest.mark.parametrize("seed", range(3))
    def test_harness_lr_matches_reference(self, corpus, seed):
        trials, plan = corpus
        flags = np.random.default_rng(seed).random(100) < 0.6
        flags[0] = True  # nothing beats an empty record, and warmup ignores the flag anyway
        cfg = replace(TrainConfig(), model=TINY_TRAIN.model, window_len=20, hop=10, max_epochs=100)
        trainer = ScriptedTrainer(trials, plan, 0, cfg, scores=scores_for(flags))
        result = trainer.run()
        assert [r["improved"] for r in result.log] == list(flags[:len(result.log)])
        expected = reference_lr_trace(flags, cfg.lr, cfg.min_lr, cfg.warmup_epochs, cfg.plateau_patience,
                                      cfg.plateau_factor, len(cfg.unfreeze_stages))
        assert trainer.lrs == expected[:len(trainer.lrs)]
        assert [r["lr"] for r in result.log] == trainer.lrs

    def test_empty_fold(self, corpus):
        trials, _ = corpus
        plan = FoldPlan(((), tuple(t.trial_id for t in trials), (), (), (), ()))
        with pytest.raises(EmptyFold):
            FoldTrainer(trials, plan, 0, TINY_TRAIN)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, -3.0])
        opt = AdamW([p], lr=0.1)
        opt.step()
        assert np.allclose(p.data, [0.9, -1.9])

    def test_decoupled_decay(self):
        p = Parameter(np.array([2.0]))
        p.grad = np.zeros(1)
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        assert np.allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_frozen_untouched(self):
        p = Parameter(np.array([1.0]), requires_grad=False)
        p.grad = np.ones(1)
        AdamW([p], lr=0.1).step()
        assert p.data[0] == 1.0

    def test_minimizes_quadratic(self):
        p = Parameter(np.array([3.0, -4.0]))
        opt = AdamW([p], lr=0.05)
        for _ in range(500):
            p.grad = 2 * p.data
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)
