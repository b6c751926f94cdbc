"""Recreate data/ml-100k/u.data from the copy of MovieLens-100K bundled in the
recbole wheel (the grouplens host is not reachable from the build sandbox).

    pip download --no-deps recbole==1.2.1 -d /tmp/dl
    python scripts/fetch_ml100k.py /tmp/dl/recbole-1.2.1-py3-none-any.whl
"""
import sys
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main(wheel: str, out: str = "data/ml-100k/u.data") -> None:
    text = zipfile.ZipFile(wheel).read(MEMBER).decode()
    rows = text.splitlines()[1:]  # drop the atomic-file header
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows)} interactions to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
