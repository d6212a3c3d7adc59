import struct
import tempfile
import unittest
from pathlib import Path

import torch

from align_gen_app.schemas import DemConfig, DitConfig, LoraConfig
from align_gen_app.services.errors import DataError, ShapeError
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import default_vocabulary
from align_gen_app.repository.checkpoints import (
    MAGIC,
    StoredTensor,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    load_into,
    read_sidecar,
    save_checkpoint,
    sidecar_path,
)


def _config(**update) -> DitConfig:
    cfg = DitConfig(d=16, blocks=1, heads=2, patch=4, image_side=16, mlp_ratio=2, redux_tokens=4, redux_patch=4,
                    lora=LoraConfig(rank=2), dem=DemConfig(heads=2, mlp_ratio=2))
    return cfg.model_copy(update=update)


class TestCheckpoints(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "model.agck"
        torch.manual_seed(0)
        self.vocab = default_vocabulary()
        self.model = AlignGenModel(_config(), self.vocab)

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load_round_trip(self):
        save_checkpoint(self.model, self.path)
        self.assertTrue(sidecar_path(self.path).is_file())
        loaded = load_checkpoint(self.path)
        for (name, expected), (_, actual) in zip(self.model.named_parameters(), loaded.named_parameters()):
            self.assertTrue(torch.equal(expected, actual), name)
        self.assertEqual(loaded.vocab.tokens, self.vocab.tokens)

    def test_sidecar_holds_config(self):
        save_checkpoint(self.model, self.path)
        cfg, vocab = read_sidecar(self.path)
        self.assertEqual(cfg.d, 16)
        self.assertEqual(cfg.vocab_size, len(vocab))

    def test_float64_tensors_keep_dtype(self):
        value = torch.randn(2, 3, dtype=torch.float64)
        (decoded,) = decode_tensors(encode_tensors([StoredTensor(name="w", group="base", value=value)]))
        self.assertEqual(decoded.value.dtype, torch.float64)
        self.assertTrue(torch.equal(decoded.value, value))

    def test_bad_magic(self):
        save_checkpoint(self.model, self.path)
        data = bytearray(self.path.read_bytes())
        data[:4] = b"NOPE"
        self.path.write_bytes(bytes(data))
        with self.assertRaises(DataError):
            load_checkpoint(self.path)

    def test_unsupported_version(self):
        data = MAGIC + struct.pack("<II", 9, 0)
        with self.assertRaises(DataError):
            decode_tensors(data)

    def test_truncated_and_trailing_bytes(self):
        save_checkpoint(self.model, self.path)
        data = self.path.read_bytes()
        with self.assertRaises(DataError):
            decode_tensors(data[:-3])
        with self.assertRaises(DataError):
            decode_tensors(data + b"\x00")

    def test_shape_mismatch_leaves_model_untouched(self):
        save_checkpoint(self.model, self.path)
        torch.manual_seed(1)
        wider = AlignGenModel(_config(d=32, heads=2, dem=DemConfig(heads=2, mlp_ratio=2)), self.vocab)
        before = {name: p.detach().clone() for name, p in wider.named_parameters()}
        with self.assertRaises(ShapeError):
            load_into(wider, self.path)
        for name, param in wider.named_parameters():
            self.assertTrue(torch.equal(before[name], param.detach()), name)

    def test_missing_checkpoint(self):
        with self.assertRaises(DataError):
            load_checkpoint(Path(self.tmp.name) / "absent.agck")

    def test_resaving_a_loaded_checkpoint_is_byte_identical(self):
        with torch.no_grad():
            self.model.s_star.normal_()
        save_checkpoint(self.model, self.path)
        again = Path(self.tmp.name) / "again.agck"
        save_checkpoint(load_checkpoint(self.path), again)
        self.assertEqual(self.path.read_bytes(), again.read_bytes())
        self.assertEqual(sidecar_path(self.path).read_text(encoding="utf-8"),
                         sidecar_path(again).read_text(encoding="utf-8"))


if __name__ == '__main__':
    unittest.main()
