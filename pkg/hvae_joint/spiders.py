import logging
import multiprocessing
import os
from pathlib import Path
from queue import Empty
from typing import Dict, List, Optional, Tuple

import scrapy
from scrapy.crawler import CrawlerProcess
from scrapy.http import Request
from scrapy.settings import Settings

from hvae_joint import settings
from hvae_joint.errors import DataError
from hvae_joint.items import PairItem
from infra.image_store import ImageStore

logger = logging.getLogger(__name__)


def _list_stems(directory: Path, pattern: str) -> Dict[str, List[Path]]:
    if not directory.is_dir():
        raise DataError(f"Directory doesn't exist: {directory}")
    files: Dict[str, List[Path]] = {}
    for path in sorted(directory.glob(pattern)):
        if path.is_file():
            files.setdefault(path.stem, []).append(path.resolve())
    return files


def match_pairs(image_dir, mask_dir, pattern: str = '*') -> List[Tuple[str, Path, Path]]:
    """
    Pair image and mask files by stem.

    Returns:
        (stem, image path, mask path) in stem order. A stem stored in several
        image files appears once per file.

    Raises:
        DataError: A directory is missing, or listing every stem that has an
            image but no mask or the other way round
    """
    images = _list_stems(Path(image_dir), pattern)
    masks = _list_stems(Path(mask_dir), pattern)
    logger.info(f"Found {sum(map(len, images.values()))} images in {image_dir} "
                f"and {sum(map(len, masks.values()))} masks in {mask_dir}")

    without_mask = sorted(set(images) - set(masks))
    without_image = sorted(set(masks) - set(images))
    if without_mask or without_image:
        problems = []
        if without_mask:
            problems.append(f"images without mask: {', '.join(without_mask)}")
        if without_image:
            problems.append(f"masks without image: {', '.join(without_image)}")
        raise DataError(f"Unmatched files ({'; '.join(problems)})")

    return [(stem, image_path, masks[stem][0]) for stem in sorted(images) for image_path in images[stem]]


class PairSpider(scrapy.Spider):
    name = 'pair_spider'

    def __init__(self, *args, **kwargs):
        super(PairSpider, self).__init__(*args, **kwargs)
        self._logger = logging.getLogger(self.__class__.__name__)
        self.image_dir = Path(kwargs.get('image_dir', os.path.join(settings.DATA_DIR, 'images')))
        self.mask_dir = Path(kwargs.get('mask_dir', os.path.join(settings.DATA_DIR, 'masks')))
        self.pattern = kwargs.get('pattern', '*')
        manifest_path = kwargs.get('manifest_path')
        self.manifest_path = Path(manifest_path) if manifest_path else self.image_dir.parent / 'manifest.csv'
        self.split = kwargs.get('split', 'train')
        self.source = kwargs.get('source', 'external')
        self.store = ImageStore(root=str(self.manifest_path.parent))
        self.candidates: Dict[str, List[str]] = {}
        self.rejected: List[str] = []
        self.files_processed = 0
        self.items_processed = 0

    def start_requests(self):
        """Start requests for every image file that has a mask, as file:// URLs."""
        try:
            pairs = match_pairs(self.image_dir, self.mask_dir, self.pattern)
        except DataError as e:
            self.reject('*', str(e))
            return

        for stem, image_path, _ in pairs:
            self.candidates.setdefault(stem, []).append(str(image_path))
        for stem, image_path, mask_path in pairs:
            yield Request(
                url=image_path.as_uri(),
                callback=self.parse_image,
                cb_kwargs={'stem': stem, 'image_path': str(image_path), 'mask_path': str(mask_path)},
                dont_filter=True,
            )

    def parse_image(self, response, stem: str, image_path: str, mask_path: str):
        """Decode the image, then request its mask."""
        try:
            image, image_maxval = self.store.decode(response.body, image_path)
        except DataError as e:
            self.reject(stem, str(e))
            return
        self.files_processed += 1

        item = PairItem()
        item['stem'] = stem
        item['image_path'] = image_path
        item['mask_path'] = mask_path
        item['image'] = image
        item['image_maxval'] = image_maxval
        item['split'] = self.split
        item['source'] = self.source
        # Duplicate stems share one mask file
        yield Request(url=Path(mask_path).as_uri(), callback=self.parse_mask,
                      cb_kwargs={'item': item}, dont_filter=True)

    def parse_mask(self, response, item: PairItem):
        try:
            item['mask'], item['mask_maxval'] = self.store.decode(response.body, item['mask_path'])
        except DataError as e:
            self.reject(item['stem'], str(e))
            return
        self.files_processed += 1
        self.items_processed += 1
        yield item

    def preferred_image(self, stem: str) -> Optional[str]:
        """The image kept for a stem: the first of its files in sorted order."""
        files = self.candidates.get(stem)
        return files[0] if files else None

    def reject(self, stem: str, reason: str) -> None:
        """Record a pair that makes the whole ingestion fail."""
        self._logger.error(f"Rejected {stem}: {reason}")
        self.rejected.append(reason)

    def summary(self) -> str:
        return f"{self.items_processed} pairs from {self.files_processed} files"

    def closed(self, reason):
        self._logger.info(f"Spider closed ({reason}): {self.summary()}, {len(self.rejected)} rejected")


def _crawl(outcomes, overrides: dict, spider_kwargs: dict) -> None:
    crawl_settings = Settings()
    crawl_settings.setmodule(settings, priority='project')
    crawl_settings.update(overrides, priority='cmdline')

    process = CrawlerProcess(crawl_settings)
    crawler = process.create_crawler(PairSpider)
    outcome = {'failure': None}

    def failed(failure):
        outcome['failure'] = failure.getErrorMessage()

    process.crawl(crawler, **spider_kwargs).addErrback(failed)
    process.start()

    spider = crawler.spider
    outcome['accepted'] = crawler.stats.get_value('item_scraped_count', 0)
    outcome['dropped'] = crawler.stats.get_value('item_dropped_count', 0)
    outcome['rejected'] = list(spider.rejected) if spider is not None else []
    outcome['summary'] = spider.summary() if spider is not None else ''
    outcomes.put(outcome)


def crawl_pairs(pipelines: Dict[str, int], **spider_kwargs) -> dict:
    """
    Run PairSpider with the given ITEM_PIPELINES and report what happened.

    The crawl runs in a fresh process because the Twisted reactor of a
    CrawlerProcess cannot be started twice in one interpreter.

    Returns:
        Dict with accepted and dropped item counts, the rejection reasons,
        the spider summary and the crawl failure message (None on success)

    Raises:
        DataError: The crawl process exited without reporting
    """
    context = multiprocessing.get_context('spawn')
    outcomes = context.Queue()
    worker = context.Process(target=_crawl, args=(outcomes, {'ITEM_PIPELINES': pipelines}, spider_kwargs),
                             name='pair-crawl')
    worker.start()

    outcome = None
    while outcome is None and worker.is_alive():
        try:
            outcome = outcomes.get(timeout=1.0)
        except Empty:
            pass
    if outcome is None:
        try:
            outcome = outcomes.get(timeout=1.0)
        except Empty:
            pass
    worker.join()
    if outcome is None:
        raise DataError(f"Ingestion crawl exited with code {worker.exitcode} without reporting")
    return outcome
