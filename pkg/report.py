#!/usr/bin/env python3
"""
Report script for collecting the summary tables of an experiment into one CSV.

This script:
1. Locates the experiment directory (the most recent one under --out by default)
2. Reads the segmentation (table1.csv) and generation (table2.csv) summaries
3. Filters rows by model and synthetic count and exports a combined CSV
"""

import os
import csv
import logging
import argparse
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import dotenv_values

from hvae_joint.experiment import TABLE1_FIELDS, TABLE2_FIELDS

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
    handlers=[logging.StreamHandler()]
)

logger = logging.getLogger('report')

REPORT_FIELDS = ['experiment', 'arm', 'model', 'synthetic', 'dsc_mean', 'dsc_std',
                 'psnr_mean', 'psnr_std', 'ssim_mean', 'ssim_std', 'runs']


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(description='Combine experiment summary tables into one CSV')

    parser.add_argument('--output', type=str, default='summary.csv',
                        help='Output CSV file path (default: summary.csv)')

    parser.add_argument('--experiment', type=str, default=None,
                        help='Experiment directory (default: newest under --out)')

    parser.add_argument('--out', type=str,
                        default=os.environ.get('HVAE_OUT_DIR', os.path.join(os.getcwd(), 'out')),
                        help='Root of experiment directories')

    parser.add_argument('--model', type=str, default=None,
                        help='Keep only rows of this model (real, vae, hvae, std-aug)')

    parser.add_argument('--count', type=int, default=None,
                        help='Keep only arms with this many synthetic pairs')

    return parser.parse_args(argv)


def find_experiment(args) -> Optional[Path]:
    """
    Resolve the experiment directory.

    Args:
        args: Command line arguments

    Returns:
        Path: Directory holding table1.csv, or None if nothing was found
    """
    if args.experiment:
        return Path(args.experiment)
    root = Path(args.out)
    if not root.is_dir():
        return None
    candidates = [d for d in root.iterdir() if (d / 'table1.csv').is_file()]
    if not candidates:
        return None
    return max(candidates, key=lambda d: (d / 'table1.csv').stat().st_mtime)


def read_table(path: Path, fields) -> List[Dict[str, str]]:
    if not path.is_file():
        logger.warning(f"Missing summary table {path}")
        return []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != tuple(fields):
            raise ValueError(f"{path} has columns {reader.fieldnames}, expected {list(fields)}")
        return list(reader)


def combine(table1: List[Dict[str, str]], table2: List[Dict[str, str]], experiment: str,
            model: Optional[str] = None, count: Optional[int] = None) -> List[Dict[str, str]]:
    """
    Join segmentation rows with the generation metrics of their model.

    Args:
        table1: Rows of table1.csv
        table2: Rows of table2.csv
        experiment: Experiment id written into every row
        model: Model filter
        count: Synthetic count filter

    Returns:
        List[Dict]: Combined rows
    """
    generation = {row['model']: row for row in table2}
    rows = []
    for row in table1:
        if model and row['model'] != model:
            continue
        if count is not None and int(row['synthetic']) != count:
            continue
        metrics = generation.get(row['model'], {})
        rows.append({
            'experiment': experiment,
            **{key: row[key] for key in TABLE1_FIELDS},
            **{key: metrics.get(key, '') for key in ('psnr_mean', 'psnr_std', 'ssim_mean', 'ssim_std')},
        })
    return rows


def export_to_csv(data: List[Dict], output_path: str) -> bool:
    """
    Export combined rows to a CSV file.

    Returns:
        bool: True if export was successful, False otherwise
    """
    if not data:
        logger.warning("No data to export")
        return False

    try:
        with open(output_path, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            writer.writerows(data)
        logger.info(f"Exported {len(data)} rows to {output_path}")
        return True

    except OSError as e:
        logger.error(f"Error exporting to CSV: {e}")
        return False


def main(argv=None) -> int:
    """Main function to collect the summary tables and export them."""
    args = parse_args(argv)

    directory = find_experiment(args)
    if directory is None:
        logger.error(f"No experiment found under {args.out}")
        return 1

    index = dotenv_values(directory / 'index.txt') if (directory / 'index.txt').is_file() else {}
    logger.info(f"Reading experiment {directory.name} (plan {index.get('plan', 'unknown')})")

    table1 = read_table(directory / 'table1.csv', TABLE1_FIELDS)
    table2 = read_table(directory / 'table2.csv', TABLE2_FIELDS)
    rows = combine(table1, table2, directory.name, model=args.model, count=args.count)

    logger.info(f"Selection returned {len(rows)} rows")
    if rows and export_to_csv(rows, args.output):
        logger.info(f"Data successfully exported to {args.output}")
        return 0
    logger.warning("No rows matched the selection")
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
