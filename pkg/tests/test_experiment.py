import csv
from dataclasses import replace

import pytest
from dotenv import dotenv_values

import report
from hvae_joint import experiment
from hvae_joint.errors import ConfigError, NumericalError
from hvae_joint.experiment import ExperimentPlan, TABLE1_FIELDS, TABLE2_FIELDS, run_full_experiment
from hvae_joint.hamiltonian import HmcConfig
from hvae_joint.phantoms import PhantomConfig
from hvae_joint.training import SegmenterConfig, TrainConfig


def tiny_plan(out_dir, **changes) -> ExperimentPlan:
    values = dict(
        phantom=PhantomConfig(height=8, width=8, tumor_radius_min=0.1, tumor_radius_max=0.3, seed=11),
        generative=TrainConfig(epochs=1, batch_size=2, latent_dim=4, widths=(4,), attention_reduction=2,
                               checkpoint_every=0, threads=1, hmc=HmcConfig(steps=2, step_size=0.05)),
        segmenter=SegmenterConfig(epochs=1, batch_size=2, learning_rate=1e-2, depth=1, base_width=4, threads=1),
        n_train=4, n_test=4, synthetic_counts=(2, 4), runs=2, std_aug=True, std_aug_factors=(2,),
        eval_subset=3, seed=9, out_dir=str(out_dir),
    )
    values.update(changes)
    return ExperimentPlan(**values)


def _rows(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope='module')
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp('experiment')
    plan = tiny_plan(root)
    return plan, run_full_experiment(plan)


class TestRunFullExperiment:
    def test_table1_arms(self, finished):
        _, result = finished
        rows = _rows(result.table1)
        assert tuple(rows[0]) == TABLE1_FIELDS
        assert [row['arm'] for row in rows] == ['reference', 'vae+2', 'vae+4', 'hvae+2', 'hvae+4', 'std-aug-x2']
        assert [row['synthetic'] for row in rows] == ['0', '2', '4', '2', '4', '4']
        assert all(row['runs'] == '2' for row in rows)
        for row in rows:
            assert 0.0 <= float(row['dsc_mean']) <= 1.0
            assert float(row['dsc_std']) >= 0.0

    def test_table2_models(self, finished):
        _, result = finished
        rows = _rows(result.table2)
        assert tuple(rows[0]) == TABLE2_FIELDS
        assert [row['model'] for row in rows] == ['vae', 'hvae']
        for row in rows:
            assert -1.0 <= float(row['ssim_mean']) <= 1.0

    def test_layout(self, finished):
        plan, result = finished
        assert result.directory.name == plan.fingerprint()[:12]
        for relative in ('data/train.csv', 'data/test.csv', 'models/vae/vae.ckpt', 'models/hvae/hvae.ckpt',
                         'samples/hvae/hvae.csv', 'arms/reference/runs.csv', 'arms/vae+2/run01_dsc.csv',
                         'metrics/vae.csv', 'index.txt'):
            assert (result.directory / relative).is_file(), relative
        assert len(_rows(result.directory / 'samples' / 'vae' / 'vae.csv')) == 4
        assert set(result.colocalization) == {'vae', 'hvae'}

    def test_rerun_reuses_every_stage(self, finished, monkeypatch):
        plan, result = finished

        def refuse(*args, **kwargs):
            raise AssertionError('stage should have been cached')

        before = (result.table1.read_bytes(), result.table2.read_bytes())
        for name in ('generate_dataset', 'train_generative', 'sample_pairs', 'train_segmenter'):
            monkeypatch.setattr(experiment, name, refuse)
        again = run_full_experiment(plan)
        assert (again.table1.read_bytes(), again.table2.read_bytes()) == before
        assert again.dsc['reference'].values == result.dsc['reference'].values

    def test_same_plan_elsewhere_is_identical(self, finished, tmp_path):
        _, result = finished
        other = run_full_experiment(tiny_plan(tmp_path))
        assert other.directory.name == result.directory.name
        assert other.table1.read_bytes() == result.table1.read_bytes()
        assert other.table2.read_bytes() == result.table2.read_bytes()
        for kind in ('vae', 'hvae'):
            relative = f"models/{kind}/{kind}.ckpt"
            assert (other.directory / relative).read_bytes() == (result.directory / relative).read_bytes()

    def test_report_combines_tables(self, finished, tmp_path):
        plan, result = finished
        output = tmp_path / 'summary.csv'
        assert report.main(['--out', plan.out_dir, '--output', str(output), '--model', 'hvae']) == 0
        rows = _rows(output)
        assert [row['arm'] for row in rows] == ['hvae+2', 'hvae+4']
        assert all(row['experiment'] == result.directory.name for row in rows)
        assert all(row['psnr_mean'] for row in rows)


class TestPlan:
    def test_fingerprint_ignores_location_and_threads(self, tmp_path):
        plan = tiny_plan(tmp_path)
        moved = replace(plan, out_dir=str(tmp_path / 'elsewhere'),
                        generative=replace(plan.generative, threads=4))
        assert moved.fingerprint() == plan.fingerprint()
        assert replace(plan, seed=10).fingerprint() != plan.fingerprint()

    @pytest.mark.parametrize('changes', [
        {'synthetic_counts': (4, 2)},
        {'synthetic_counts': (2, 2)},
        {'synthetic_counts': ()},
        {'models': ('gan',)},
        {'models': ('vae', 'vae')},
        {'runs': 0},
        {'n_train': 0},
        {'std_aug_factors': (1,)},
        {'threshold': 1.5},
    ])
    def test_invalid(self, tmp_path, changes):
        with pytest.raises(ConfigError):
            tiny_plan(tmp_path, **changes).validate()

    def test_failure_names_stage(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise NumericalError('loss is nan')

        monkeypatch.setattr(experiment, 'train_generative', diverge)
        with pytest.raises(NumericalError, match="Stage 'train-vae' failed"):
            run_full_experiment(tiny_plan(tmp_path, models=('vae',)))


class TestStageIndex:
    def test_finished_stage_is_reused(self, tmp_path):
        artifact = tmp_path / 'a.txt'
        calls = []

        def build():
            calls.append(1)
            artifact.write_text('done')

        experiment._Stages(tmp_path, 'x').run('make-a', artifact, build)
        again = experiment._Stages(tmp_path, 'x')
        again.run('make-a', artifact, build)
        assert calls == [1]
        assert (again.hits, again.misses) == (1, 0)
        assert dotenv_values(tmp_path / 'index.txt')['stage.make-a'] == 'a.txt'

    def test_missing_artifact_runs_again(self, tmp_path):
        artifact = tmp_path / 'a.txt'
        stages = experiment._Stages(tmp_path, 'x')
        stages.run('make-a', artifact, lambda: artifact.write_text('done'))
        artifact.unlink()
        stages.run('make-a', artifact, lambda: artifact.write_text('again'))
        assert artifact.read_text() == 'again'
        assert stages.misses == 2

    def test_failed_stage_is_not_recorded(self, tmp_path):
        stages = experiment._Stages(tmp_path, 'x')

        def fail():
            raise NumericalError('loss is nan')

        with pytest.raises(NumericalError):
            stages.run('make-a', tmp_path / 'a.txt', fail)
        assert not stages.is_done('make-a')
