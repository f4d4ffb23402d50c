import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

import click


def inputs(*args, file_okay=True, dir_okay=True):
    """Decorator for adding a single input path argument, allowing files or dirs.

    Args:
        file_okay (bool, optional): Accept a file. Defaults to True.
        dir_okay (bool, optional): Accept a dir. Defaults to True.
    """
    args = args if args else ["input"]
    return click.argument(*args, type=click.Path(file_okay=file_okay, dir_okay=dir_okay, exists=True, readable=True))


def outputs(default="."):
    """Decorator for adding a output option."""
    return click.option(
        "--out", "-o", default=default, show_default=True, type=click.Path(file_okay=False, writable=True), help="Dir to write outputs into."
    )


def sha256_hex(text) -> str:
    """Hex digest of the UTF-8 bytes of a str (or of raw bytes)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()


def rename_dup(l: Iterable[str]):
    """Rename duplicated names in a list with increasing suffixes."""
    l = list(l)
    results = []
    for i, v in enumerate(l):
        totalcount = l.count(v)
        count = l[:i].count(v)
        results.append(v + "~" + str(count + 1) if totalcount > 1 and count else v)
    return results


def parse_input(input, ext=".sol"):
    """Parse a path of dir or file to a sorted list of files.

    Args:
        input (str or Path): path of an input dir or file.
        ext (str, optional): extension to be searched recursively in dirs. Defaults to ".sol".
    """
    f = Path(input)
    if f.is_file():
        return [f]
    elif f.is_dir():
        return sorted(p for p in f.rglob(f"*{ext}") if p.is_file())
    else:
        raise IOError(f"Input files in: {input} are not found.")


def dumps(obj, indent=2) -> str:
    """Serialize to JSON keeping insertion order of keys, which is fixed by the dataclass field order."""
    return json.dumps(obj, indent=indent, ensure_ascii=False)


def dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(obj))
        f.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(items: Iterable[dict], path):
    """Write one JSON object per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item, ensure_ascii=False))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    """Read one JSON object per line, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


class ProxyBase:
    """
    A proxy class that make accesses just like direct access to __subject__ if not overwriten in the class.
    Attributes defined in class.__noproxy__ will not be proxied to __subject__.
    """

    __slots__ = ()

    def __call__(self, *args, **kw):
        return self.__subject__(*args, **kw)

    def __getattribute__(self, attr, oga=object.__getattribute__):
        if attr.startswith("__") and attr not in ("__class__", "__dict__"):
            subject = oga(self, "__subject__")
            if attr == "__subject__":
                return subject
            return getattr(subject, attr)
        return oga(self, attr)

    def __getattr__(self, attr, oga=object.__getattribute__):
        return getattr(oga(self, "__subject__"), attr)

    def __setattr__(self, attr, val, osa=object.__setattr__):
        if attr == "__subject__" or attr in getattr(self.__class__, "__noproxy__", ()):
            return osa(self, attr, val)
        return setattr(self.__subject__, attr, val)

    def __bool__(self):
        return bool(self.__subject__)

    def __getitem__(self, arg):
        return self.__subject__[arg]

    def __setitem__(self, arg, val):
        self.__subject__[arg] = val

    def __contains__(self, ob):
        return ob in self.__subject__

    def __repr__(self):
        return repr(self.__subject__)

    def __iter__(self):
        return iter(self.__subject__)

    def __len__(self):
        return len(self.__subject__)
