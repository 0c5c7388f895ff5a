from pathlib import Path
from urllib.parse import urlparse
from urllib.request import url2pathname

import numpy as np
import pytest
from scrapy.exceptions import DropItem
from scrapy.http import Request, Response
from scrapy.utils.conf import build_component_list

from hvae_joint import settings
from hvae_joint.dataset import (
    augment_pairs,
    ingest_external,
    iterate_batches,
    load_dataset,
    load_manifest,
    transform_pair,
)
from hvae_joint.errors import ConfigError, DataError
from hvae_joint.items import PairItem
from hvae_joint.phantoms import generate_dataset, generate_phantom
from hvae_joint.pipelines import (
    DuplicateStemPipeline,
    ManifestPipeline,
    MaskValidationPipeline,
    ShapeConsistencyPipeline,
)
from hvae_joint.spiders import PairSpider, match_pairs
from infra.image_store import ImageStore


def _write_pairs(root, stems, shape=(8, 8), seed=0, fmt='pgm'):
    """External layout: <root>/images/<stem> and <root>/masks/<stem>."""
    store = ImageStore(root=str(root))
    rng = np.random.default_rng(seed)
    extension = '.pgm' if fmt == 'pgm' else '.imgf'
    for stem in stems:
        store.write_image(root / 'images' / f"{stem}{extension}", rng.uniform(size=shape), fmt)
        store.write_image(root / 'masks' / f"{stem}{extension}",
                          (rng.uniform(size=shape) > 0.5).astype(float), fmt)
    return root / 'images', root / 'masks'


def _write_manifest(root, rows):
    store = ImageStore(root=str(root))
    return store.write_manifest(rows, root / 'manifest.csv')


class TestLoadDataset:
    def test_raw_round_trip_is_exact(self, phantom_config, tmp_path):
        generate_dataset(phantom_config, 3, out_dir=tmp_path, fmt='raw')
        pairs = load_dataset(tmp_path / 'train.csv')
        for index, pair in enumerate(pairs):
            expected = generate_phantom(phantom_config, index)
            assert np.array_equal(pair.image.data, expected.image.data)
            assert np.array_equal(pair.mask.data, expected.mask.data)

    def test_pgm_round_trip_within_quantization(self, phantom_config, tmp_path):
        generate_dataset(phantom_config, 2, out_dir=tmp_path, fmt='pgm')
        pairs = load_dataset(tmp_path / 'train.csv')
        for index, pair in enumerate(pairs):
            expected = generate_phantom(phantom_config, index)
            assert np.abs(pair.image.data - expected.image.data).max() <= 0.5 / 255 + 1e-12
            assert np.array_equal(pair.mask.data, expected.mask.data)

    def test_missing_file_names_the_record(self, phantom_config, tmp_path):
        generate_dataset(phantom_config, 2, out_dir=tmp_path, fmt='raw')
        (tmp_path / 'phantom-000001_mask.imgf').unlink()
        with pytest.raises(DataError, match='phantom-000001'):
            load_dataset(tmp_path / 'train.csv')

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / 'nothing.csv')

    def test_8bit_mask_255_loads_as_one(self, tmp_path):
        store = ImageStore(root=str(tmp_path))
        store.write_image(tmp_path / 'a_image.pgm', np.full((4, 4), 0.5), 'pgm')
        mask = np.zeros((4, 4))
        mask[1:3, 1:3] = 1.0
        store.write_image(tmp_path / 'a_mask.pgm', mask, 'pgm')
        path = _write_manifest(tmp_path, [{'id': 'a', 'image': 'a_image.pgm', 'mask': 'a_mask.pgm', 'split': 'train'}])
        (pair,) = load_dataset(path)
        assert np.array_equal(pair.mask_array(), mask)
        assert pair.image_array()[0, 0] == pytest.approx(128 / 255)

    def test_non_binary_mask_rejected(self, tmp_path):
        store = ImageStore(root=str(tmp_path))
        store.write_image(tmp_path / 'a_image.pgm', np.full((4, 4), 0.5), 'pgm')
        store.write_image(tmp_path / 'a_mask.pgm', np.array([[0.0, 0.4, 1.0, 1.0]] * 4), 'pgm')
        path = _write_manifest(tmp_path, [{'id': 'a', 'image': 'a_image.pgm', 'mask': 'a_mask.pgm', 'split': 'train'}])
        with pytest.raises(DataError, match="'a'"):
            load_dataset(path)

    def test_shape_disagreement(self, tmp_path):
        store = ImageStore(root=str(tmp_path))
        for record_id, shape in (('a', (4, 4)), ('b', (6, 6))):
            store.insert_pair(record_id, np.zeros(shape), np.zeros(shape), fmt='raw')
        rows = [{'id': r, 'image': f"{r}_image.imgf", 'mask': f"{r}_mask.imgf", 'split': 'train'} for r in 'ab']
        with pytest.raises(DataError, match="'b'"):
            load_dataset(_write_manifest(tmp_path, rows))

    def test_split_filter(self, tmp_path):
        store = ImageStore(root=str(tmp_path))
        rows = []
        for record_id, split in (('a', 'train'), ('b', 'test'), ('c', 'train')):
            image, mask = store.insert_pair(record_id, np.zeros((4, 4)), np.zeros((4, 4)), fmt='raw')
            rows.append({'id': record_id, 'image': image, 'mask': mask, 'split': split})
        path = _write_manifest(tmp_path, rows)
        assert len(load_dataset(path, split='train')) == 2
        assert len(load_dataset(path, split='test')) == 1
        assert len(load_dataset(path)) == 3

    def test_duplicate_ids(self, tmp_path):
        rows = [{'id': 'a', 'image': 'x', 'mask': 'y', 'split': 'train'}] * 2
        with pytest.raises(DataError, match='Duplicate'):
            load_manifest(_write_manifest(tmp_path, rows))

    def test_manifest_provenance_defaults_to_external(self, tmp_path):
        path = tmp_path / 'manifest.csv'
        path.write_text('id,image,mask,split\n', encoding='utf-8')
        assert load_manifest(path).provenance == 'external'


class TestIngestExternal:
    def test_valid_pairs(self, tmp_path):
        stems = [f"case{i:02d}" for i in range(10)]
        images, masks = _write_pairs(tmp_path, stems)
        manifest = ingest_external(images, masks)
        assert manifest.ids() == stems
        assert manifest.provenance == 'external'
        pairs = load_dataset(manifest.path)
        assert len(pairs) == 10
        assert all(set(np.unique(p.mask.data)) <= {0.0, 1.0} for p in pairs)

    def test_image_without_mask(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01', 'case02'])
        (masks / 'case02.pgm').unlink()
        with pytest.raises(DataError, match='case02'):
            ingest_external(images, masks)

    def test_grayscale_mask_reports_values(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01'])
        ImageStore().write_image(masks / 'case01.pgm', np.array([[0.0, 0.4, 1.0, 1.0]] * 8 + [[0.0] * 4]), 'pgm')
        ImageStore().write_image(images / 'case01.pgm', np.zeros((9, 4)), 'pgm')
        with pytest.raises(DataError, match='102:8'):
            ingest_external(images, masks)

    def test_shapes_must_agree(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01'])
        _write_pairs(tmp_path, ['case02'], shape=(6, 6), seed=1)
        with pytest.raises(DataError, match='case02'):
            ingest_external(images, masks)

    def test_duplicate_stem_dropped(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01'])
        ImageStore().write_image(images / 'case01.imgf', np.zeros((8, 8)), 'raw')
        manifest = ingest_external(images, masks)
        assert manifest.ids() == ['case01']

    def test_pattern_and_manifest_path(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['keep01', 'skip01'])
        manifest = ingest_external(images, masks, pattern='keep*', manifest_path=tmp_path / 'out' / 'ext.csv',
                                   split='test')
        assert manifest.ids() == ['keep01']
        assert load_manifest(tmp_path / 'out' / 'ext.csv').records[0].split == 'test'
        assert len(load_dataset(tmp_path / 'out' / 'ext.csv')) == 1

    def test_nothing_usable(self, tmp_path):
        (tmp_path / 'images').mkdir()
        (tmp_path / 'masks').mkdir()
        with pytest.raises(DataError, match='No usable pairs'):
            ingest_external(tmp_path / 'images', tmp_path / 'masks')

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="doesn't exist"):
            ingest_external(tmp_path / 'images', tmp_path / 'masks')

    def test_every_rejection_reported_and_no_manifest(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01', 'case02', 'case03'])
        for stem in ('case01', 'case03'):
            ImageStore().write_image(masks / f"{stem}.pgm", np.full((8, 8), 0.4), 'pgm')
        with pytest.raises(DataError, match='2 pairs rejected') as excinfo:
            ingest_external(images, masks)
        assert "'case01'" in str(excinfo.value)
        assert "'case03'" in str(excinfo.value)
        assert not (tmp_path / 'manifest.csv').exists()

    def test_unknown_pipeline(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01'])
        with pytest.raises(ConfigError, match='NoSuchPipeline'):
            ingest_external(images, masks, pipelines={'hvae_joint.pipelines.NoSuchPipeline': 100})

    def test_pipeline_override(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['case01'])
        manifest = ingest_external(images, masks, pipelines={
            'hvae_joint.pipelines.PairCleaningPipeline': 300,
            'hvae_joint.pipelines.ManifestPipeline': 800,
        })
        assert manifest.ids() == ['case01']


def _crawl_offline(spider):
    """Run a spider's callbacks over its file:// requests without starting a reactor."""
    items, pending = [], list(spider.start_requests())
    while pending:
        request = pending.pop(0)
        body = Path(url2pathname(urlparse(request.url).path)).read_bytes()
        response = Response(url=request.url, body=body, request=request)
        for output in request.callback(response, **request.cb_kwargs):
            (pending if isinstance(output, Request) else items).append(output)
    return items


def _spider(tmp_path, **kwargs):
    return PairSpider(image_dir=str(tmp_path / 'images'), mask_dir=str(tmp_path / 'masks'), **kwargs)


def _item(stem, image, mask, maxval=1, image_path=None):
    return PairItem(stem=stem, image_path=image_path or f"/data/images/{stem}.pgm",
                    mask_path=f"/data/masks/{stem}.pgm", image=np.asarray(image, dtype=float),
                    mask=np.asarray(mask, dtype=float), image_maxval=maxval, mask_maxval=maxval,
                    split='train', source='external')


class TestMatchPairs:
    def test_pairs_in_stem_order(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['b', 'a'])
        pairs = match_pairs(images, masks)
        assert [stem for stem, _, _ in pairs] == ['a', 'b']
        assert pairs[0][1] == (images / 'a.pgm').resolve()
        assert pairs[0][2] == (masks / 'a.pgm').resolve()

    def test_unmatched_lists_both_sides(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['a', 'b'])
        (images / 'a.pgm').unlink()
        (masks / 'b.pgm').unlink()
        with pytest.raises(DataError) as excinfo:
            match_pairs(images, masks)
        assert 'images without mask: b' in str(excinfo.value)
        assert 'masks without image: a' in str(excinfo.value)

    def test_one_entry_per_duplicate_file(self, tmp_path):
        images, masks = _write_pairs(tmp_path, ['a'])
        ImageStore().write_image(images / 'a.imgf', np.zeros((8, 8)), 'raw')
        pairs = match_pairs(images, masks)
        assert [image.name for _, image, _ in pairs] == ['a.imgf', 'a.pgm']
        assert pairs[0][2] == pairs[1][2]


class TestPairSpider:
    def test_requests_are_file_urls(self, tmp_path):
        _write_pairs(tmp_path, ['a', 'b'])
        spider = _spider(tmp_path)
        requests = list(spider.start_requests())
        assert [request.cb_kwargs['stem'] for request in requests] == ['a', 'b']
        assert all(request.url.startswith('file://') for request in requests)
        assert spider.manifest_path == tmp_path / 'manifest.csv'

    def test_callbacks_decode_pairs(self, tmp_path):
        _write_pairs(tmp_path, ['a', 'b'])
        spider = _spider(tmp_path, split='test')
        items = _crawl_offline(spider)
        assert [item['stem'] for item in items] == ['a', 'b']
        assert items[0]['image'].shape == (8, 8)
        assert items[0]['mask_maxval'] == 255
        assert items[0]['split'] == 'test'
        assert spider.summary() == '2 pairs from 4 files'
        assert spider.rejected == []

    def test_unmatched_files_rejected(self, tmp_path):
        images, _ = _write_pairs(tmp_path, ['a', 'b'])
        (images / 'a.pgm').unlink()
        spider = _spider(tmp_path)
        assert list(spider.start_requests()) == []
        assert 'masks without image: a' in spider.rejected[0]

    def test_undecodable_image_rejected(self, tmp_path):
        images, _ = _write_pairs(tmp_path, ['a', 'b'])
        (images / 'a.pgm').write_bytes(b'not an image')
        spider = _spider(tmp_path)
        assert [item['stem'] for item in _crawl_offline(spider)] == ['b']
        assert len(spider.rejected) == 1
        assert 'a.pgm' in spider.rejected[0]

    def test_preferred_image_is_first_file(self, tmp_path):
        images, _ = _write_pairs(tmp_path, ['a'])
        ImageStore().write_image(images / 'a.imgf', np.zeros((8, 8)), 'raw')
        spider = _spider(tmp_path)
        list(spider.start_requests())
        assert spider.preferred_image('a').endswith('a.imgf')
        assert spider.preferred_image('zz') is None


class TestPipelines:
    def test_default_order(self):
        order = build_component_list(settings.ITEM_PIPELINES)
        assert order[0] == 'hvae_joint.pipelines.DuplicateStemPipeline'
        assert order[-1] == 'hvae_joint.pipelines.ManifestPipeline'

    def test_duplicate_kept_only_for_preferred_file(self, tmp_path):
        spider = _spider(tmp_path)
        spider.candidates = {'a': ['/data/images/a.imgf', '/data/images/a.pgm']}
        pipeline = DuplicateStemPipeline()
        with pytest.raises(DropItem):
            pipeline.process_item(_item('a', np.zeros((2, 2)), np.zeros((2, 2)), image_path='/data/images/a.pgm'),
                                  spider)
        kept = _item('a', np.zeros((2, 2)), np.zeros((2, 2)), image_path='/data/images/a.imgf')
        assert pipeline.process_item(kept, spider) is kept
        assert spider.rejected == []

    def test_non_binary_mask_rejected(self, tmp_path):
        spider = _spider(tmp_path)
        item = _item('a', np.zeros((2, 2)), [[0, 102], [255, 255]], maxval=255)
        with pytest.raises(DropItem):
            MaskValidationPipeline().process_item(item, spider)
        assert "'a'" in spider.rejected[0]
        assert '102:1' in spider.rejected[0]

    def test_shape_disagreement_rejected(self, tmp_path):
        spider = _spider(tmp_path)
        pipeline = ShapeConsistencyPipeline()
        pipeline.open_spider(spider)
        pipeline.process_item(_item('a', np.zeros((4, 4)), np.zeros((4, 4))), spider)
        with pytest.raises(DropItem):
            pipeline.process_item(_item('b', np.zeros((6, 6)), np.zeros((6, 6))), spider)
        assert "'b' [6, 6] disagrees with 'a' [4, 4]" in spider.rejected[0]

    def test_manifest_sorted_by_stem(self, tmp_path):
        spider = _spider(tmp_path)
        pipeline = ManifestPipeline()
        pipeline.open_spider(spider)
        for stem in ('b', 'a'):
            pipeline.process_item(_item(stem, np.zeros((2, 2)), np.zeros((2, 2))), spider)
        pipeline.close_spider(spider)
        assert load_manifest(tmp_path / 'manifest.csv').ids() == ['a', 'b']

    def test_manifest_not_written_after_rejection(self, tmp_path):
        spider = _spider(tmp_path)
        pipeline = ManifestPipeline()
        pipeline.open_spider(spider)
        pipeline.process_item(_item('a', np.zeros((2, 2)), np.zeros((2, 2))), spider)
        spider.reject('b', 'broken')
        pipeline.close_spider(spider)
        assert not (tmp_path / 'manifest.csv').exists()

class TestAugmentation:
    def test_transform_matches_numpy(self, make_pair, rng):
        pair = make_pair(rng)
        rotated = transform_pair(pair, 1, 0)
        assert np.array_equal(rotated.image_array(), np.rot90(pair.image_array()))
        flipped = transform_pair(pair, 2, 2)
        assert np.array_equal(flipped.mask_array(), np.flipud(np.rot90(pair.mask_array(), 2)))

    def test_factor_one_keeps_originals(self, make_pair, rng):
        pairs = [make_pair(rng) for _ in range(3)]
        assert augment_pairs(pairs, 1, rng) == pairs

    def test_copies_are_joint_transforms(self, make_pair, rng):
        pairs = [make_pair(rng) for _ in range(2)]
        augmented = augment_pairs(pairs, 3, np.random.default_rng(0))
        assert len(augmented) == 6
        assert augmented[:2] == pairs
        for index, copy in enumerate(augmented[2:]):
            source = pairs[index % 2]
            matches = [(r, f) for r in range(4) for f in range(3)
                       if np.array_equal(transform_pair(source, r, f).image_array(), copy.image_array())
                       and np.array_equal(transform_pair(source, r, f).mask_array(), copy.mask_array())]
            assert matches and (0, 0) not in matches

    def test_non_square_keeps_shape(self, make_pair, rng):
        pairs = [make_pair(rng, height=4, width=8)]
        for pair in augment_pairs(pairs, 10, rng):
            assert pair.spatial_shape == (4, 8)

    def test_invalid_factor(self, make_pair, rng):
        with pytest.raises(ConfigError):
            augment_pairs([make_pair(rng)], 0, rng)


class TestIterateBatches:
    def test_sequential(self):
        batches = [b.tolist() for b in iterate_batches(10, 4)]
        assert batches == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]

    def test_shuffled_covers_everything(self, rng):
        batches = list(iterate_batches(10, 3, rng))
        assert [len(b) for b in batches] == [3, 3, 3, 1]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
