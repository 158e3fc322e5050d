"""Layer fusion, lowering to slot-operation stages, execution and op reports.

A model is first split into groups by :func:`fuse_linear`: runs of linear
layers between squares collapse into one affine stage, while the first
convolution (and any layer with the ``conv-pack`` policy) is evaluated with
packed scalar multiplications instead.  :func:`lower` then fixes the slot
layout flowing between stages, inserting map merges ("Flat"), sparse gathers
and permutation compaction where the next stage needs a dense ciphertext.
:func:`execute` runs the program on the slot simulator and meters each stage.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import matvec
from .convlower import (
    conv_pack,
    conv_packed_forward,
    conv_to_matrix,
    merge_maps,
    pointwise_packed_forward,
    pool_to_matrix,
    square_layer,
)
from .modelspec import (
    LayerKind,
    LayerSpec,
    ModelSpec,
    Policy,
    Weights,
    check_weights,
    filter_bank,
)
from .slotvec import (
    CapacityError,
    Kind,
    MeterContext,
    OpTally,
    ShapeError,
    SlotVector,
    add,
    add_many,
    encode,
    encrypt,
    mul,
)


class LoweringError(ValueError):
    """A model cannot be lowered as described (unsupported layer/policy combination)."""


# --------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class LayerGroup:
    label: str
    kind: str  # "linear", "square" or "conv-pack"
    layers: tuple
    in_shapes: tuple  # input shape of each constituent layer
    out_shape: tuple
    policy: Policy | None = None

    @property
    def in_shape(self) -> tuple:
        return self.in_shapes[0]

    @property
    def n(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def m(self) -> int:
        return int(np.prod(self.out_shape))


def _group_label(layers) -> str:
    explicit = [layer.stage for layer in layers if layer.stage]
    if explicit:
        return explicit[0]
    names = [layer.label for layer in layers if layer.kind is not LayerKind.FLATTEN] or [layers[0].label]
    return names[0] if len(names) == 1 else f"{names[0]}-{names[-1]}"


def fuse_linear(model: ModelSpec, fuse: bool = True) -> list[LayerGroup]:
    """Split ``model`` into stages; with ``fuse`` maximal linear runs become one stage.

    A run is broken by a square layer, by a ``conv-pack`` layer, or where two
    layers carry different explicit ``stage`` names.  Without ``fuse`` every
    linear layer is its own stage (flattens ride along with the next layer).
    """
    shapes = model.shapes()
    groups: list[LayerGroup] = []
    run: list[tuple[LayerSpec, tuple]] = []
    seen_linear = False

    def close():
        if run and any(layer.kind is not LayerKind.FLATTEN for layer, _ in run):
            layers = tuple(layer for layer, _ in run)
            policies = {layer.policy for layer in layers if layer.policy is not None}
            if len(policies) > 1:
                raise LoweringError(f"stage '{_group_label(layers)}' mixes kernel policies {sorted(p.value for p in policies)}")
            out_shape = run[-1][0].output_shape(run[-1][1])
            groups.append(LayerGroup(_group_label(layers), "linear", layers, tuple(s for _, s in run),
                                     out_shape, policies.pop() if policies else None))
        run.clear()

    for layer, in_shape in zip(model.layers, shapes):
        if layer.kind is LayerKind.SQUARE:
            close()
            groups.append(LayerGroup(layer.label, "square", (layer,), (in_shape,), in_shape))
            continue
        first_conv = not seen_linear and layer.kind.is_conv
        seen_linear = True
        if first_conv and layer.policy not in (None, Policy.CONV_PACK):
            raise LoweringError(f"layer '{layer.label}': the first convolution is always conv-packed")
        if first_conv or layer.policy is Policy.CONV_PACK:
            close()
            groups.append(LayerGroup(layer.label, "conv-pack", (layer,), (in_shape,),
                                     layer.output_shape(in_shape), Policy.CONV_PACK))
            continue
        if run:
            current = next((lay.stage for lay, _ in run if lay.stage), None)
            has_body = any(lay.kind is not LayerKind.FLATTEN for lay, _ in run)
            if (not fuse and has_body) or (current and layer.stage and layer.stage != current):
                close()
        run.append((layer, in_shape))
    close()
    return groups


# --------------------------------------------------------------------------
# program


@dataclass(frozen=True)
class Layout:
    """How a logical vector is spread over the ciphertexts between two stages.

    ``maps``: one ciphertext per channel, ``sizes[0]`` slots each.
    ``blocks``: consecutive chunks of the vector, chunk ``i`` in slots
    ``0..sizes[i]-1`` of ciphertext ``i``.  ``sparse``: one value per
    ciphertext at slot 0.  ``interleaved``: one ciphertext, entry ``i`` at
    slot ``perm[i]``.  ``clean`` means all other slots are zero.
    """

    kind: str
    sizes: tuple = ()
    clean: bool = True
    perm: tuple | None = None

    @property
    def n_ciphertexts(self) -> int:
        if self.kind == "image":
            return 0
        return 1 if self.kind == "interleaved" else len(self.sizes)

    @property
    def length(self) -> int:
        if self.kind == "interleaved":
            return len(self.perm)
        if self.kind == "sparse":
            return len(self.sizes)
        return int(sum(self.sizes))

    def describe(self) -> str:
        if self.kind == "image":
            return "cleartext image"
        if self.kind == "interleaved":
            return f"interleaved[{len(self.perm)}]"
        if self.kind == "maps":
            return f"maps[{len(self.sizes)}x{self.sizes[0]}]"
        if self.kind == "sparse":
            return f"sparse[{len(self.sizes)}]"
        return "blocks[" + "+".join(str(s) for s in self.sizes) + "]"


@dataclass(frozen=True)
class Stage:
    label: str
    op: str  # conv-pack, pointwise, merge, square, linear, gather, compact
    in_layout: Layout
    out_layout: Layout
    group: LayerGroup | None = None
    kernel: Policy | None = None
    stack_width: int | None = None

    def describe(self) -> str:
        kernel = f" [{self.kernel.value}]" if self.kernel and self.op == "linear" else ""
        shape = ""
        if self.op == "linear":
            shape = f" m={self.group.m} n={self.group.n}"
        return (f"{self.label:<14} {self.op}{kernel}{shape}: "
                f"{self.in_layout.describe()} -> {self.out_layout.describe()}")


@dataclass(frozen=True)
class LoweredProgram:
    model: ModelSpec
    stages: tuple
    n_slots: int

    @property
    def labels(self) -> list[str]:
        return [stage.label for stage in self.stages]

    @property
    def output_layout(self) -> Layout:
        return self.stages[-1].out_layout if self.stages else Layout("blocks", (self.model.input_size,))

    def describe(self) -> str:
        lines = [f"model {self.model.name}, N={self.n_slots}"]
        lines += ["  " + stage.describe() for stage in self.stages]
        return "\n".join(lines)


def balanced_sizes(count: int, groups: int) -> tuple:
    base, extra = divmod(count, groups)
    return tuple(base + (1 if i < extra else 0) for i in range(groups))


def _consumer_fits(group: LayerGroup | None, kernel: Policy | None, n_slots: int):
    if group is None or group.kind != "linear":
        return lambda n: True
    if kernel is Policy.HS:
        return lambda n: group.m <= n_slots and not matvec.hs_plan(group.m, n, n_slots)[2]
    return lambda n: matvec.next_pow2(n) <= n_slots


def plan_merge(count: int, width: int, n_slots: int, fits) -> tuple:
    """Fewest balanced groups of maps such that each group fits the consumer.

    A group fits when it fits in ``N`` slots and, for a Halevi-Shoup consumer,
    needs no zero-row padding.  When no grouping avoids padding, the fewest
    groups that merely fit are used.
    """
    if width > n_slots:
        raise CapacityError(f"a single map of {width} slots exceeds N={n_slots}")
    for check in (fits, lambda n: True):
        for g in range(1, count + 1):
            sizes = balanced_sizes(count, g)
            if all(s * width <= n_slots and check(s * width) for s in sizes):
                return sizes
    raise CapacityError(f"{count} maps of {width} slots cannot be merged into N={n_slots}")


def _kernel_for(group: LayerGroup, override: Policy | None) -> Policy:
    if group.kind != "linear":
        return Policy.CONV_PACK
    return override or group.policy or Policy.HS


def _with_stage(label: str, exc: Exception) -> Exception:
    return type(exc)(f"stage '{label}': {exc}")


def lower(model: ModelSpec, policy: Policy | str | None = None, fuse: bool = True,
          n_slots: int | None = None) -> LoweredProgram:
    """Lower ``model`` to a staged program; ``policy`` overrides every non-packed linear stage."""
    if isinstance(policy, str):
        policy = Policy(policy)
    if policy is Policy.CONV_PACK:
        raise LoweringError("conv-pack cannot be used as a global kernel override")
    N = n_slots or model.n_slots
    groups = fuse_linear(model, fuse=fuse)
    kernels = [_kernel_for(g, policy) for g in groups]
    stages: list[Stage] = []
    counters: dict[str, int] = {}

    def auto_label(prefix: str) -> str:
        counters[prefix] = counters.get(prefix, 0) + 1
        return f"{prefix}{counters[prefix]}"

    def next_consumer(idx: int):
        for j in range(idx + 1, len(groups)):
            if groups[j].kind != "square":
                return groups[j], kernels[j]
        return None, None

    if groups and groups[0].kind == "conv-pack":
        layout = Layout("image")
    else:
        if model.input_size > N:
            raise CapacityError(f"input of {model.input_size} values exceeds N={N}")
        layout = Layout("blocks", (model.input_size,))

    for idx, (group, kernel) in enumerate(zip(groups, kernels)):
        label = group.label
        try:
            if group.kind == "square":
                stages.append(Stage(label, "square", layout, layout, group))
                continue

            if group.kind == "conv-pack":
                layer = group.layers[0]
                shape = layer.conv_shape(group.in_shape)
                width = shape.d_out ** 2
                if width > N:
                    raise CapacityError(f"d_out^2={width} > N={N}")
                if layout.kind == "image":
                    op = "conv-pack"
                else:
                    if layer.k != 1 or layer.s != 1:
                        raise LoweringError("packed intermediate convolutions must be 1x1 with stride 1")
                    layout = _to_channel_blocks(stages, layout, group, N, auto_label)
                    op = "pointwise"
                out = Layout("maps", (width,) * shape.c_out)
                stages.append(Stage(label, op, layout, out, group, Policy.CONV_PACK))
                layout = out
            else:
                if layout.length != group.n:
                    raise ShapeError(f"expects {group.n} inputs, previous stage yields {layout.length}")
                out, width = _linear_output(group, kernel, layout, N)
                stages.append(Stage(label, "linear", layout, out, group, kernel, width))
                layout = out
        except (CapacityError, ShapeError, LoweringError) as exc:
            raise _with_stage(label, exc) from exc

        consumer, consumer_kernel = next_consumer(idx)
        if consumer is None:
            continue
        if layout.kind == "maps":
            merge_label = auto_label("Flat")
            try:
                sizes = plan_merge(len(layout.sizes), layout.sizes[0], N,
                                   _consumer_fits(consumer, consumer_kernel, N))
            except CapacityError as exc:
                raise _with_stage(merge_label, exc) from exc
            out = Layout("blocks", tuple(s * layout.sizes[0] for s in sizes))
            stages.append(Stage(merge_label, "merge", layout, out))
            layout = out
        elif layout.kind == "sparse":
            gather_label = auto_label("Gather")
            if len(layout.sizes) > N:
                raise CapacityError(f"stage '{gather_label}': {len(layout.sizes)} values exceed N={N}")
            out = Layout("blocks", (len(layout.sizes),))
            stages.append(Stage(gather_label, "gather", layout, out))
            layout = out

    return LoweredProgram(model, tuple(stages), N)


def _to_channel_blocks(stages, layout: Layout, group: LayerGroup, N: int, auto_label) -> Layout:
    width = group.in_shape[1] * group.in_shape[2]
    if layout.kind == "interleaved":
        out = Layout("blocks", (len(layout.perm),))
        stages.append(Stage(auto_label("Compact"), "compact", layout, out))
        layout = out
    if layout.kind != "blocks" or any(size % width for size in layout.sizes):
        raise LoweringError(f"packed convolution needs whole channels per ciphertext, got {layout.describe()}")
    return layout


def _linear_output(group: LayerGroup, kernel: Policy, layout: Layout, N: int) -> tuple[Layout, int | None]:
    m = group.m
    spans = [max(layout.perm) + 1] if layout.kind == "interleaved" else list(layout.sizes)
    if kernel is Policy.HS:
        for n in spans:
            matvec.hs_plan(m, n, N)
        return Layout("blocks", (m,), clean=False), None
    if kernel is Policy.LOLA_DENSE:
        for n in spans:
            if matvec.next_pow2(n) > N:
                raise CapacityError(f"input span {n} needs {matvec.next_pow2(n)} slots, have N={N}")
        return Layout("sparse", (1,) * m, clean=False), None
    width = max(matvec.next_pow2(n) for n in spans)
    if width > N:
        raise CapacityError(f"stacking width {width} exceeds N={N}")
    if m > N:
        raise CapacityError(f"m={m} outputs exceed N={N}")
    perm = matvec.stacked_permutation(m, spans[0], N, width)
    return Layout("interleaved", perm=tuple(int(p) for p in perm)), width


# --------------------------------------------------------------------------
# execution


def stage_matrix(group: LayerGroup, weights: Weights) -> tuple[sp.csr_array, np.ndarray]:
    """Affine map of a fused linear stage as a sparse matrix and a bias vector."""
    A, b = None, None
    for layer, in_shape in zip(group.layers, group.in_shapes):
        kind = layer.kind
        if kind is LayerKind.FLATTEN:
            continue
        if kind.is_conv:
            M, mb = conv_to_matrix(layer.conv_shape(in_shape), filter_bank(layer, weights))
        elif kind is LayerKind.AVGPOOL:
            M = pool_to_matrix(in_shape[0], in_shape[1], layer.k, layer.s)
            mb = np.zeros(M.shape[0])
        elif kind is LayerKind.DENSE:
            W, wb = weights[layer.label]
            M, mb = np.asarray(W, dtype=np.float64), np.asarray(wb, dtype=np.float64)
        else:
            raise LoweringError(f"layer '{layer.label}' of kind {kind.value} is not linear")
        if A is None:
            A, b = M, mb
        elif sp.issparse(A) and not sp.issparse(M):
            # dense product; sparse-by-sparse would be slow and fill in anyway
            A, b = M @ A.toarray(), M @ b + mb
        else:
            A, b = M @ A, M @ b + mb
    return sp.csr_array(A), b


def _column_blocks(A: sp.csr_array, layout: Layout) -> list[np.ndarray]:
    if layout.kind == "interleaved":
        perm = np.asarray(layout.perm)
        out = np.zeros((A.shape[0], perm.max() + 1))
        out[:, perm] = A.toarray()
        return [out]
    A = A.tocsc()
    bounds = np.cumsum((0,) + tuple(layout.sizes))
    return [A[:, lo:hi].toarray() for lo, hi in zip(bounds[:-1], bounds[1:])]


def _clean_mask(ct: SlotVector, size: int, ctx) -> SlotVector:
    mask = np.zeros(ct.n_slots)
    mask[:size] = 1.0
    return mul(ct, SlotVector(mask, Kind.PLAINTEXT), ctx)


def _run_linear(stage: Stage, cts: list[SlotVector], weights: Weights, ctx: MeterContext) -> list[SlotVector]:
    A, bias = stage_matrix(stage.group, weights)
    blocks = _column_blocks(A, stage.in_layout)
    N = cts[0].n_slots
    kernel = stage.kernel
    if kernel is Policy.HS:
        acc = add_many([matvec.hs_matvec(Ab, ct, ctx) for Ab, ct in zip(blocks, cts)], ctx)
        return [add(acc, encode(bias, N), ctx)]
    if kernel is Policy.LOLA_DENSE:
        parts = [matvec.lola_dense_matvec(Ab, ct, ctx) for Ab, ct in zip(blocks, cts)]
        outs = [add_many(column, ctx) for column in zip(*parts)]
        return [add(ct, encode([b], N), ctx) for ct, b in zip(outs, bias)]
    merged = []
    for Ab, ct in zip(blocks, cts):
        if not stage.in_layout.clean:
            ct = _clean_mask(ct, Ab.shape[1], ctx)
        out, _ = matvec.lola_stacked_matvec(Ab, ct, ctx, width=stage.stack_width)
        merged.append(out)
    acc = add_many(merged, ctx)
    bias_pt = np.zeros(N)
    bias_pt[list(stage.out_layout.perm)] = bias
    return [add(acc, SlotVector(bias_pt, Kind.PLAINTEXT), ctx)]


def _run_stage(stage: Stage, cts, weights: Weights, x, ctx: MeterContext, N: int):
    op = stage.op
    if op == "conv-pack":
        layer = stage.group.layers[0]
        packed = conv_pack(x, layer.conv_shape(stage.group.in_shape), N)
        return conv_packed_forward(packed, filter_bank(layer, weights), ctx)
    if op == "pointwise":
        layer = stage.group.layers[0]
        width = stage.out_layout.sizes[0]
        counts = [size // width for size in stage.in_layout.sizes]
        return pointwise_packed_forward(cts, counts, width, filter_bank(layer, weights), ctx)
    if op == "merge":
        width = stage.in_layout.sizes[0]
        out, start = [], 0
        for size in stage.out_layout.sizes:
            count = size // width
            out.append(merge_maps(cts[start:start + count], width, ctx))
            start += count
        return out
    if op == "square":
        return [square_layer(ct, ctx) for ct in cts]
    if op == "gather":
        return [matvec.gather_sparse(cts, ctx)]
    if op == "compact":
        return [matvec.compact(cts[0], stage.in_layout.perm, ctx)]
    if op == "linear":
        return _run_linear(stage, cts, weights, ctx)
    raise LoweringError(f"unknown stage op '{op}'")


def read_output(cts: list[SlotVector], layout: Layout) -> np.ndarray:
    """Decode the logical output vector from the final ciphertexts."""
    if layout.kind == "interleaved":
        return cts[0].slots[list(layout.perm)].copy()
    if layout.kind == "sparse":
        return np.array([ct.slots[0] for ct in cts])
    return np.concatenate([ct.slots[:size] for ct, size in zip(cts, layout.sizes)])


def execute(program: LoweredProgram, weights: Weights, x, ctx: MeterContext | None = None):
    """Run ``program`` on cleartext input ``x``; returns ``(logits, OpReport)``.

    Softmax is not evaluated.  With the default Halevi-Shoup final stage,
    class ``c`` is read from slot ``c``.
    """
    model = program.model
    check_weights(model, weights)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input {model.input_shape}")
    ctx = ctx if ctx is not None else MeterContext()
    N = program.n_slots
    start = ctx.snapshot()
    cts = [] if program.stages and program.stages[0].op == "conv-pack" else [encrypt(x.ravel(), N)]
    rows = []
    for stage in program.stages:
        before = ctx.per_layer.get(stage.label, OpTally()).copy()
        with ctx.stage(stage.label):
            cts = _run_stage(stage, cts, weights, x, ctx, N)
        rows.append((stage.label, ctx.per_layer[stage.label] - before))
    logits = read_output(cts, program.output_layout)
    report = OpReport(rows, model.name, N)
    assert report.total().as_tuple() == (ctx.snapshot() - start).as_tuple()
    return logits, report


# --------------------------------------------------------------------------
# reporting

COLUMNS = ("total", "add_pc", "add_cc", "mul_pc", "mul_cc", "rot")
CSV_HEADER = "layer," + ",".join(COLUMNS)
TABLE_HEADER = ("Total HOPs", "Add PC", "Add CC", "Mul PC", "Mul CC", "Rot")


@dataclass
class OpReport:
    rows: list = field(default_factory=list)  # (label, OpTally)
    model_name: str = ""
    n_slots: int = 0

    def total(self) -> OpTally:
        acc = OpTally()
        for _, tally in self.rows:
            acc = acc + tally
        return acc

    def row(self, label: str) -> OpTally:
        if label == "Total":
            return self.total()
        for name, tally in self.rows:
            if name == label:
                return tally
        raise KeyError(label)

    @property
    def labels(self) -> list[str]:
        return [name for name, _ in self.rows]

    def as_dict(self) -> dict:
        out = {name: tally.as_tuple() for name, tally in self.rows}
        out["Total"] = self.total().as_tuple()
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for name, values in self.as_dict().items():
            buf.write(name + "," + ",".join(str(v) for v in values) + "\n")
        return buf.getvalue()

    def format_table(self, references: dict | None = None) -> str:
        """Human-readable table; zero counts print as ``-``.

        ``references`` maps a column tag to ``{label: 6-tuple}``; each tag adds
        one sub-column per operation class next to the measured value.
        """
        references = references or {}
        tags = ["measured"] + list(references)
        measured = self.as_dict()
        labels = list(measured)
        for ref in references.values():
            labels += [lab for lab in ref if lab not in labels]
        cell = lambda v: "-" if not v else str(v)  # noqa: E731
        sub = max(7, max(len(t) for t in tags) + 1)
        width = sub * len(tags)
        lines = [f"{'Layer':<14}" + "".join(f"{h:^{width}}|" for h in TABLE_HEADER)]
        lines.append(" " * 14 + "".join("".join(f"{t:>{sub}}" for t in tags) + "|" for _ in TABLE_HEADER))
        for lab in labels:
            if lab == "Total":
                lines.append("-" * len(lines[0]))
            values = [measured.get(lab)] + [ref.get(lab) for ref in references.values()]
            parts = []
            for col in range(len(TABLE_HEADER)):
                parts.append("".join(f"{('' if v is None else cell(v[col])):>{sub}}" for v in values) + "|")
            lines.append(f"{lab:<14}" + "".join(parts))
        return "\n".join(lines)
