import pytest

from bench import dataset
from bench.calc import Bandwidth
from bench.dataset import DatasetSpec
from bench.units import KIB, MIB
from errors import TransferError
from wan import staging
from wan.models import Integrity
from wan.staging import Direction, StagingJob, probe_storage, stage


@pytest.fixture
def production(tmp_path):
    manifest = dataset.generate_dataset(DatasetSpec(16 * KIB, 10, tmp_path / "prod", content_seed=8))
    return tmp_path / "prod", manifest


def test_stage_in_copies_and_verifies(tmp_path, production):
    root, manifest = production
    result = stage(StagingJob(root, tmp_path / "burst", manifest), workers=3)

    assert result.ok
    assert result.files_ok == 10
    assert result.bytes_moved == manifest.total_bytes
    assert len(result.per_stream_bytes) == 3
    assert result.integrity == Integrity.VERIFIED
    assert dataset.verify_dataset(manifest, root=tmp_path / "burst").intact


def test_rerun_skips_files_already_staged(tmp_path, production, monkeypatch):
    root, manifest = production
    job = StagingJob(root, tmp_path / "burst", manifest)
    stage(job)

    def no_copies(*args):
        raise AssertionError("staged file copied again")

    monkeypatch.setattr(staging, "_copy_verified", no_copies)
    assert stage(job).files_ok == 10


def test_corrupt_source_file_is_not_staged(tmp_path, production):
    root, manifest = production
    victim = manifest.entries[5].path
    data = bytearray((root / victim).read_bytes())
    data[0] ^= 0xFF
    (root / victim).write_bytes(bytes(data))

    result = stage(StagingJob(root, tmp_path / "burst", manifest, Direction.STAGE_OUT))

    assert result.failed_files == (victim,)
    assert result.files_ok == 9
    assert not (tmp_path / "burst" / victim).exists()
    assert not list((tmp_path / "burst").rglob("*.part"))


def test_missing_source_file_is_counted(tmp_path, production):
    root, manifest = production
    (root / manifest.entries[0].path).unlink()
    result = stage(StagingJob(root, tmp_path / "burst", manifest))
    assert result.files_failed == 1


def test_staging_onto_itself_is_refused(production):
    root, manifest = production
    with pytest.raises(TransferError):
        StagingJob(root, root, manifest)


def test_missing_source_directory(tmp_path, production):
    _, manifest = production
    with pytest.raises(TransferError):
        stage(StagingJob(tmp_path / "nowhere", tmp_path / "burst", manifest))


def test_storage_probe_compares_with_the_network_rate(tmp_path):
    slow_network = probe_storage(tmp_path, 4 * MIB, Bandwidth(1), block=MIB)
    assert slow_network.sufficient
    assert slow_network.write_bps > 0 and slow_network.read_bps > 0
    assert not (tmp_path / ".wanbench-probe").exists()

    impossible = probe_storage(tmp_path, MIB, Bandwidth(10**18), block=MIB)
    assert not impossible.sufficient
