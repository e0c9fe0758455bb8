"""Discrete architecture produced by distillation, as a line-oriented text file.

One record per superkernel::

    # sknas architecture v1
    body.enc_blocks.0.layers.0.inner.conv1 variant=joint kernel=5 count=3
    body.enc_blocks.0.layers.0.inner.conv2 variant=filterwise kernel=3 filters=0,2,5 of=6
"""

from __future__ import annotations

from dataclasses import dataclass

from .superkernel import KernelChoice

HEADER = "# sknas architecture v1"


class ArchSpecFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchRecord:
    path: str
    variant: str
    kernel_size: int
    count: int | None = None
    filters: tuple[int, ...] | None = None
    max_filters: int | None = None

    @classmethod
    def from_choice(cls, path: str, variant: str, choice: KernelChoice) -> "ArchRecord":
        if choice.count is not None:
            return cls(path, variant, choice.kernel_size, count=choice.count)
        return cls(path, variant, choice.kernel_size, filters=tuple(choice.channels()),
                   max_filters=len(choice.mask))

    def choice(self) -> KernelChoice:
        if self.count is not None:
            return KernelChoice(self.kernel_size, count=self.count)
        mask = [False] * self.max_filters
        for i in self.filters:
            mask[i] = True
        return KernelChoice(self.kernel_size, mask=tuple(mask))

    @property
    def num_filters(self) -> int:
        return self.count if self.count is not None else len(self.filters)

    def to_line(self) -> str:
        parts = [self.path, f"variant={self.variant}", f"kernel={self.kernel_size}"]
        if self.count is not None:
            parts.append(f"count={self.count}")
        else:
            parts.append("filters=" + ",".join(str(i) for i in self.filters))
            parts.append(f"of={self.max_filters}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "ArchRecord":
        path, *kvs = line.split()
        fields = {}
        for kv in kvs:
            if "=" not in kv:
                raise ArchSpecFormatError(f"malformed token {kv!r} in line {line!r}")
            k, v = kv.split("=", 1)
            fields[k] = v
        try:
            if "count" in fields:
                return cls(path, fields["variant"], int(fields["kernel"]), count=int(fields["count"]))
            filters = tuple(int(i) for i in fields["filters"].split(",") if i)
            return cls(path, fields["variant"], int(fields["kernel"]), filters=filters,
                       max_filters=int(fields["of"]))
        except (KeyError, ValueError) as exc:
            raise ArchSpecFormatError(f"bad record {line!r}: {exc}") from exc


@dataclass
class ArchitectureSpec:
    records: list[ArchRecord]

    def __len__(self) -> int:
        return len(self.records)

    def choices(self) -> dict[str, KernelChoice]:
        return {r.path: r.choice() for r in self.records}

    def dumps(self) -> str:
        return "\n".join([HEADER] + [r.to_line() for r in self.records]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ArchitectureSpec":
        lines = text.splitlines()
        if not lines or lines[0].strip() != HEADER:
            raise ArchSpecFormatError("missing architecture header")
        recs = [ArchRecord.from_line(l) for l in lines[1:] if l.strip() and not l.startswith("#")]
        return cls(recs)

    def summary(self) -> str:
        """Human-readable table of the chosen kernel sizes and filter counts."""
        if not self.records:
            return "no superkernels\n"
        w = max(len(r.path) for r in self.records)
        rows = [f"{'superkernel':<{w}}  kernel  filters"]
        for r in self.records:
            sel = str(r.count) if r.count is not None else f"{len(r.filters)}/{r.max_filters}"
            rows.append(f"{r.path:<{w}}  {r.kernel_size:>6}  {sel:>7}")
        return "\n".join(rows) + "\n"
