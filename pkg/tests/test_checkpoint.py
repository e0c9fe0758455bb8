import numpy as np
import pytest

from sknas import checkpoint
from sknas.archspec import ArchitectureSpec, ArchRecord, ArchSpecFormatError
from sknas.blocks import UNetSpec, build_model, distill_model
from sknas.superkernel import KernelChoice
from sknas.tensor import Rng, Tensor

from support import SEARCH_VARIANTS, harden_randomly, wake_up


def assert_same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb)
    for k in sa:
        assert sa[k].shape == sb[k].shape, k
        assert sa[k].tobytes() == sb[k].tobytes(), k


@pytest.mark.parametrize("variant", ("none",) + SEARCH_VARIANTS)
def test_supernet_round_trip_is_bitwise(variant, tmp_path):
    model = build_model(UNetSpec(blocks_per_level=1), variant, Rng(3), tau=0.7, key_dim=4)
    wake_up(model)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, extra={"note": "x"})
    back, arch, extra = checkpoint.load(path)
    assert arch is None and extra == {"note": "x"}
    assert back.config() == model.config()
    assert_same_state(model, back)
    assert checkpoint.dumps(back, extra={"note": "x"}) == path.read_bytes()


@pytest.mark.parametrize("variant", SEARCH_VARIANTS)
def test_distilled_round_trip_preserves_outputs(variant, tmp_path):
    model = build_model(UNetSpec(blocks_per_level=1, subnetworks=1), variant, Rng(4))
    wake_up(model)
    harden_randomly(model, seed=5)
    small, arch = distill_model(model)
    checkpoint.save(tmp_path / "d.ckpt", small, arch)
    back, arch2, _ = checkpoint.load(tmp_path / "d.ckpt")
    assert back.distilled and arch2 == arch
    assert_same_state(small, back)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 8, 8)))
    assert back(x).data.tobytes() == small(x).data.tobytes()


def test_format_errors():
    model = build_model(UNetSpec(blocks_per_level=1), "joint", Rng(0))
    buf = checkpoint.dumps(model)
    with pytest.raises(checkpoint.CheckpointFormatError, match="magic"):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(checkpoint.CheckpointFormatError, match="truncated"):
        checkpoint.loads(buf[:-3])
    with pytest.raises(checkpoint.CheckpointFormatError, match="trailing"):
        checkpoint.loads(buf + b"\0")
    with pytest.raises(checkpoint.CheckpointFormatError, match="version"):
        checkpoint.loads(buf[:4] + (9).to_bytes(4, "little") + buf[8:])


class TestArchitectureSpec:
    def test_round_trip(self):
        spec = ArchitectureSpec([
            ArchRecord.from_choice("a.conv1", "joint", KernelChoice(3, count=2)),
            ArchRecord.from_choice("a.conv2", "filterwise", KernelChoice(5, mask=(True, False, True))),
        ])
        text = spec.dumps()
        assert text.splitlines()[1] == "a.conv1 variant=joint kernel=3 count=2"
        assert text.splitlines()[2] == "a.conv2 variant=filterwise kernel=5 filters=0,2 of=3"
        assert ArchitectureSpec.loads(text) == spec
        assert ArchitectureSpec.loads(text).choices()["a.conv2"] == KernelChoice(5, mask=(True, False, True))

    def test_model_spec_round_trip(self):
        model = build_model(UNetSpec(), "filterwise-attention", Rng(1))
        _, arch = distill_model(model)
        assert ArchitectureSpec.loads(arch.dumps()) == arch
        assert "kernel" in arch.summary()

    @pytest.mark.parametrize("text", ["", "a variant=joint kernel=3 count=1\n",
                                      "# sknas architecture v1\na variant=joint kernel=x count=1\n",
                                      "# sknas architecture v1\na variant=joint kernel\n"])
    def test_malformed(self, text):
        with pytest.raises(ArchSpecFormatError):
            ArchitectureSpec.loads(text)
