"""Deterministic CSV emission with schema-tagged provenance comments.

Every table starts with one ``#`` comment carrying the schema version and
the configuration hash, followed by a mandatory header row.  Floats are
formatted with 17 significant digits so identical numbers produce identical
bytes.
"""

import math

from ..errors import SchemaError


def fmt(value):
    """Canonical text form of a cell value."""
    if value is None:
        return "nan"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    if isinstance(value, (int, str)):
        return str(value)
    return format(float(value), ".17g")


def write_table(path, schema, header, rows, provenance=""):
    lines = [f"# provenance: schema={schema}" + (f" {provenance}" if provenance else "")]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(fmt(cell) for cell in row))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def read_table(path, expect_schema=None):
    """Read a table back; returns (meta, header, rows of string cells)."""
    with open(path, encoding="utf-8") as handle:
        lines = [line.rstrip("\n") for line in handle]
    meta = {}
    while lines and lines[0].startswith("#"):
        for token in lines[0].lstrip("# ").replace("provenance:", "").split():
            if "=" in token:
                key, _, value = token.partition("=")
                meta[key] = value
        lines = lines[1:]
    if expect_schema is not None and meta.get("schema") != expect_schema:
        raise SchemaError(
            f"{path}: schema is {meta.get('schema')!r}, expected {expect_schema!r}"
        )
    if not lines:
        raise SchemaError(f"{path}: missing header row")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:] if line]
    return meta, header, rows


def read_fits_txt(path):
    """Parse the structured fit report into {method: {key: value}}."""
    sections = {}
    current = None
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].removeprefix("fit ").strip()
                sections[current] = {}
            elif "=" in line and current is not None:
                key, _, value = line.partition("=")
                sections[current][key.strip()] = value.strip()
    return sections
