import pytest
import torch

from align_gen_app.services import attnlayout
from align_gen_app.services.diffcore import NEG
from align_gen_app.services.errors import ShapeError


def _layout(n_refs=1, relevance=(False, True, True, False), batch=1, grid=(2, 2), d=4):
    n = grid[0] * grid[1]
    x = torch.randn(batch, n, d)
    text = torch.randn(batch, len(relevance), d)
    refs = [torch.randn(batch, n, d) for _ in range(n_refs)]
    flags = torch.tensor([list(relevance)] * batch)
    return attnlayout.assemble(x, text, refs, flags, grid)


def test_assemble_order_and_segments():
    layout = _layout(n_refs=2)
    assert layout.length == 4 + 4 + 4 + 4
    assert layout.segments[:4] == ["noisy"] * 4
    assert layout.segments[4:8] == ["text"] * 4
    assert layout.segments[8:12] == ["ref_1"] * 4
    assert layout.segments[12:] == ["ref_2"] * 4
    assert layout.segment_slice("ref_2") == slice(12, 16)


def test_assemble_shape_errors():
    with pytest.raises(ShapeError):
        attnlayout.assemble(torch.randn(1, 4, 4), torch.randn(1, 2, 4), [torch.randn(1, 3, 4)],
                            torch.zeros(1, 2, dtype=torch.bool), (2, 2))
    with pytest.raises(ShapeError):
        attnlayout.assemble(torch.randn(1, 4, 4), torch.randn(1, 2, 4), [], torch.zeros(1, 2, dtype=torch.bool),
                            (3, 2))


def test_rope_indices_layout():
    layout = _layout(n_refs=1)
    positions = attnlayout.rope_indices(layout)
    assert positions[:4].tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert positions[4:8].tolist() == [[0, 0]] * 4
    assert positions[8:].tolist() == [[0, 2], [0, 3], [1, 2], [1, 3]]
    assert attnlayout.rope_indices(layout, offset=5)[8].tolist() == [0, 5]


def test_mask_blocks_irrelevant_text_from_reference():
    layout = _layout(n_refs=1)
    mask = attnlayout.build_mask(layout)[0]
    text, ref = slice(4, 8), slice(8, 12)
    assert (mask[4, ref] == NEG).all() and (mask[7, ref] == NEG).all()
    assert (mask[5, ref] == 0).all() and (mask[6, ref] == 0).all()
    assert (mask[ref, text] == 0).all()
    assert (mask[:4] == 0).all()
    assert (mask[:, :4] == 0).all()


def test_symmetric_mask_blocks_reverse_direction():
    layout = _layout(n_refs=1)
    mask = attnlayout.build_mask(layout, symmetric=True)[0]
    assert (mask[8:, 4] == NEG).all() and (mask[8:, 5] == 0).all()


def test_references_do_not_see_each_other():
    layout = _layout(n_refs=2)
    mask = attnlayout.build_mask(layout)[0]
    assert (mask[8:12, 12:16] == NEG).all() and (mask[12:16, 8:12] == NEG).all()
    assert (mask[8:12, 8:12] == 0).all()


def test_disabled_mask_and_no_references_are_zero():
    assert not attnlayout.build_mask(_layout(n_refs=1), enabled=False).any()
    assert not attnlayout.build_mask(_layout(n_refs=0)).any()


def test_all_relevant_text_masks_nothing_with_one_reference():
    layout = _layout(n_refs=1, relevance=(True, True))
    assert not attnlayout.build_mask(layout).any()


def test_dump_mask_marks_blocked_cells():
    layout = _layout(n_refs=1)
    text = attnlayout.dump_mask(attnlayout.build_mask(layout)[0], layout.segments)
    lines = text.splitlines()
    assert len(lines) == layout.length
    assert lines[4].split()[1] == "." * 8 + "X" * 4
    assert lines[5].split()[1] == "." * 12


@pytest.mark.parametrize("grid", [(1, 1), (2, 3), (4, 4), (3, 5), (6, 2)])
def test_reference_positions_never_overlap_noisy_positions(grid):
    layout = _layout(n_refs=2, grid=grid)
    positions = attnlayout.rope_indices(layout)
    noisy = {tuple(p) for p in positions[layout.segment_slice("noisy")].tolist()}
    first = {tuple(p) for p in positions[layout.segment_slice("ref_1")].tolist()}
    second = {tuple(p) for p in positions[layout.segment_slice("ref_2")].tolist()}
    assert not noisy & first
    assert first == second
    assert positions[layout.segment_slice("text")].eq(0).all()


def test_offset_inside_noisy_grid_is_rejected():
    layout = _layout(n_refs=1, grid=(4, 4))
    with pytest.raises(ShapeError):
        attnlayout.rope_indices(layout, offset=1)
    assert attnlayout.rope_indices(layout, offset=4)[16:20, 1].tolist() == [4, 4, 4, 4]
