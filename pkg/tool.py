import csv

import numpy as np

import geometry

FIELD_MAGIC = "F2"


def warning(text: str):
    decorator = "#" * len(max(text.split("\n"), key=len))
    return f"\033[31;5m{decorator}\n{text}\n{decorator}\033[0m"


def format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.12g}"
    if value is None:
        return "none"
    return str(value)


def print_values(values: dict):
    for key, value in values.items():
        print(f"{key}: {format_value(value)}")


def write_csv(path: str, header: list[str], rows):
    with open(path, "w", newline="") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def write_field(field: np.ndarray, grid: geometry.Grid, path: str):
    """Plain-text field dump: a header with the grid, then ny rows of nx
    values, first row at the lowest y."""
    if field.shape != grid.shape:
        raise ValueError(f"Field {field.shape} does not match grid "
                         f"{grid.shape}")

    with open(path, "w") as field_file:
        field_file.write(f"{FIELD_MAGIC}\n{grid.nx} {grid.ny}\n")
        field_file.write(f"{grid.dx!r} {grid.dy!r} {grid.x0!r} {grid.y0!r}\n")
        for row in field:
            field_file.write(" ".join(repr(float(value)) for value in row))
            field_file.write("\n")


def read_field(path: str) -> tuple[np.ndarray, geometry.Grid]:
    with open(path) as field_file:
        if field_file.readline().strip() != FIELD_MAGIC:
            raise ValueError(f"{path} is not a field dump")

        nx, ny = map(int, field_file.readline().split())
        dx, dy, x0, y0 = map(float, field_file.readline().split())
        values = np.loadtxt(field_file, ndmin=2)

    grid = geometry.Grid(nx, ny, dx, dy, x0, y0)
    if values.shape != grid.shape:
        raise ValueError(f"{path} holds {values.shape} values, header says "
                         f"{grid.shape}")
    return values, grid


def write_segments(segments, path: str):
    rows = []
    for segment in segments:
        # Full precision so read_segments returns the same coordinates
        rows.append([
            repr(float(value))
            for value in (*segment.minus_end, *segment.plus_end,
                          *segment.orientation)
        ])
    write_csv(path, ["x1", "y1", "x2", "y2", "ox", "oy"], rows)


def read_segments(path: str) -> list[geometry.FilamentSegment]:
    samples = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    return [
        geometry.FilamentSegment((row["x1"], row["y1"]), (row["x2"], row["y2"]))
        for row in samples
    ]
