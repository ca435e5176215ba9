import argparse
import io
import logging
import sys
import zipfile
from pathlib import Path

import requests

logger = logging.getLogger(__name__)

ML100K_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
ML100K_MEMBERS = ["ml-100k/u.data", "ml-100k/u.item", "ml-100k/README"]

HEADERS = {
    "User-Agent": (
        "Mozilla/5.0 (Windows NT 10.0; Win64; x64) "
        "AppleWebKit/537.36 (KHTML, like Gecko) "
        "Chrome/120.0 Safari/537.36"
    ),
    "Accept": "application/zip,application/octet-stream;q=0.9,*/*;q=0.8",
}


def download_archive(url: str, timeout: float = 60) -> bytes:
    response = requests.get(url, headers=HEADERS, timeout=timeout)
    response.raise_for_status()
    return response.content


def extract_members(archive: bytes, output_dir: Path, members=ML100K_MEMBERS) -> list:
    written = []
    with zipfile.ZipFile(io.BytesIO(archive)) as bundle:
        available = set(bundle.namelist())
        for name in members:
            if name not in available:
                logger.warning("%s missing from archive", name)
                continue
            target = output_dir / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(bundle.read(name))
            written.append(target)
    return written


def fetch_movielens(output_dir: Path, url: str = ML100K_URL, force: bool = False) -> Path:
    """Download MovieLens 100K and return the path of its ``u.data`` file."""
    ratings_path = output_dir / "ml-100k" / "u.data"
    if ratings_path.exists() and not force:
        logger.info("%s already present, skipping download", ratings_path)
        return ratings_path
    archive = download_archive(url)
    extract_members(archive, output_dir)
    if not ratings_path.exists():
        raise FileNotFoundError(f"{url} did not contain ml-100k/u.data")
    return ratings_path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Download the MovieLens 100K rating data."
    )
    parser.add_argument(
        "--output-dir",
        default="data",
        help="Directory the ml-100k folder is extracted into.",
    )
    parser.add_argument("--url", default=ML100K_URL, help="Archive location.")
    parser.add_argument("--force", action="store_true", help="Download even if u.data exists.")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        path = fetch_movielens(Path(args.output_dir), args.url, args.force)
    except requests.HTTPError as exc:  # pragma: no cover - network errors
        logger.error("%s returned HTTP error: %s", args.url, exc)
        sys.exit(1)
    except (requests.RequestException, zipfile.BadZipFile, FileNotFoundError) as exc:  # pragma: no cover - network errors
        logger.error("download from %s failed: %s", args.url, exc)
        sys.exit(1)
    print(f"Saved MovieLens 100K ratings to {path}")
