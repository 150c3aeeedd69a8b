from pathlib import Path

import numpy as np
import pytest

from feddom.data import (DOMAIN_ORDER, ClientDataset, DatasetManifest, DomainSource, assign_clients, batch_iter,
                         build_domain_data, decode_ppm, dirichlet_partition, domain_sort_key, encode_ppm, fit_image,
                         gen_synthetic_domain, intensity_histogram, load_manifest, load_ppm_dir, luminance,
                         materialize_synthetic, scale_table, split_indices, skewed_partition, standard_partition)
from feddom.utils import ConfigurationError, PartitionError


class TestSyntheticDomains:
    @pytest.mark.parametrize("domain", DOMAIN_ORDER)
    def test_shape_and_range(self, domain):
        images = gen_synthetic_domain(domain, 3, (16, 24), seed=0)
        assert images.shape == (3, 3, 16, 24)
        assert images.min() >= 0.0
        assert images.max() <= 1.0

    def test_image_depends_only_on_its_index(self):
        full = gen_synthetic_domain("art", 5, (16, 16), seed=2)
        tail = gen_synthetic_domain("art", 2, (16, 16), seed=2, start=3)
        np.testing.assert_array_equal(full[3:], tail)

    def test_seed_changes_images(self):
        a = gen_synthetic_domain("cartoon", 2, (16, 16), seed=0)
        b = gen_synthetic_domain("cartoon", 2, (16, 16), seed=1)
        assert not np.array_equal(a, b)

    def test_domains_have_distinct_statistics(self):
        photo = intensity_histogram(gen_synthetic_domain("photo", 40, (16, 16), seed=0))
        sketch = intensity_histogram(gen_synthetic_domain("sketch", 40, (16, 16), seed=0))
        within = np.abs(photo[:20].mean(axis=0) - photo[20:].mean(axis=0)).sum()
        across = np.abs(photo.mean(axis=0) - sketch.mean(axis=0)).sum()
        assert across > within

    def test_domains_are_separable_by_intensity(self):
        def histograms(start):
            return [intensity_histogram(gen_synthetic_domain(d, 100, (32, 32), seed=0, start=start))
                    for d in DOMAIN_ORDER]

        centroids = np.stack([h.mean(axis=0) for h in histograms(0)])
        correct = total = 0
        for label, held_out in enumerate(histograms(100)):
            distances = np.linalg.norm(held_out[:, None, :] - centroids[None, :, :], axis=-1)
            correct += int(np.sum(np.argmin(distances, axis=1) == label))
            total += len(held_out)
        assert correct / total >= 0.95

    def test_sketch_is_mostly_white(self):
        lum = luminance(gen_synthetic_domain("sketch", 20, (32, 32), seed=3))
        assert np.all((lum > 0.9).mean(axis=(1, 2)) >= 0.8)

    def test_cartoon_has_flat_palette(self):
        for image in gen_synthetic_domain("cartoon", 20, (32, 32), seed=3):
            assert len(np.unique(image.reshape(3, -1).T, axis=0)) <= 16

    @pytest.mark.parametrize("args", [("watercolor", 2, (16, 16)), ("photo", 0, (16, 16)), ("photo", 2, (8, 8))])
    def test_invalid(self, args):
        with pytest.raises(ConfigurationError):
            gen_synthetic_domain(*args, seed=0)

    def test_domain_order(self):
        assert sorted(["sketch", "zebra", "photo", "alpha", "art"], key=domain_sort_key) == \
            ["photo", "art", "sketch", "alpha", "zebra"]


class TestPpm:
    def test_encode_decode(self):
        image = gen_synthetic_domain("photo", 1, (16, 16), seed=0)[0]
        decoded = decode_ppm(encode_ppm(image))
        assert decoded.shape == image.shape
        assert np.max(np.abs(decoded - image)) <= 0.5 / 255 + 1e-6

    def test_decode_is_channel_major(self):
        decoded = decode_ppm(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        assert decoded.shape == (3, 1, 2)
        np.testing.assert_array_equal(decoded.reshape(3, 2), [[1, 0], [0, 0], [0, 1]])

    def test_header_comments_and_16_bit(self):
        raster = np.array([0, 65535, 32768, 1, 2, 3], dtype=">u2").tobytes()
        blob = b"P6\n# made by hand\n2 1\n65535\n" + raster
        image = decode_ppm(blob)
        assert image.shape == (3, 1, 2)
        assert image[1, 0, 0] == pytest.approx(1.0)

    @pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n1 1\n255\n\x00", b"P6\n1", b"P6\nx 1\n255\n"])
    def test_malformed(self, blob):
        with pytest.raises(ConfigurationError):
            decode_ppm(blob, "broken.ppm")

    def test_fit_image_center_crops(self):
        image = np.zeros((3, 20, 40))
        image[:, :, 10:30] = 1.0
        fitted = fit_image(image, (16, 16))
        assert fitted.shape == (3, 16, 16)
        assert np.all(fitted == 1.0)

    def test_load_dir_skips_other_files(self, tmp_path: Path):
        images = gen_synthetic_domain("sketch", 2, (16, 16), seed=0)
        for idx, image in enumerate(images):
            (tmp_path / f"b_{idx}.ppm").write_bytes(encode_ppm(image))
        (tmp_path / "notes.txt").write_text("not an image")
        report = load_ppm_dir(tmp_path, "sketch")
        assert report.files == ["b_0.ppm", "b_1.ppm"]
        assert report.skipped == ["notes.txt"]
        assert report.images.shape == (2, 3, 16, 16)

    def test_load_missing_dir(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError):
            load_ppm_dir(tmp_path / "absent", "photo")

    def test_load_dir_without_images(self, tmp_path: Path):
        with pytest.raises(ConfigurationError):
            load_ppm_dir(tmp_path, "photo")


class TestDomainData:
    def test_split_is_deterministic_and_disjoint(self):
        train, test = split_indices("photo", 200)
        assert set(train).isdisjoint(test)
        assert len(train) + len(test) == 200
        assert 20 <= len(test) <= 60
        assert split_indices("photo", 200) == (train, test)

    def test_train_counts_are_met_exactly(self):
        manifest = DatasetManifest(domains=[DomainSource("photo", "synthetic", 5)], image_size=(16, 16))
        data = build_domain_data(manifest, {"photo": 40})
        assert len(data["photo"].train) == 40
        assert len(data["photo"].test) >= 1

    def test_directory_domain_too_small(self, tmp_path: Path):
        for idx, image in enumerate(gen_synthetic_domain("art", 6, (16, 16), seed=0)):
            (tmp_path / f"a_{idx}.ppm").write_bytes(encode_ppm(image))
        manifest = DatasetManifest(domains=[DomainSource("art", "dir", path=str(tmp_path))], image_size=(16, 16))
        with pytest.raises(PartitionError):
            build_domain_data(manifest, {"art": 50})

    def test_materialized_dataset_reloads(self, tmp_path: Path):
        manifest = DatasetManifest(domains=[DomainSource("photo", "synthetic", 30),
                                            DomainSource("cartoon", "synthetic", 30)], image_size=(16, 16), seed=4)
        written = materialize_synthetic(manifest, tmp_path)
        assert (tmp_path / "manifest.json").is_file()
        assert len(list((tmp_path / "photo").glob("*.ppm"))) == 30
        reloaded = build_domain_data(load_manifest(tmp_path / "manifest.json"))
        original = build_domain_data(manifest)
        assert [d.source for d in written.domains] == ["dir", "dir"]
        assert np.max(np.abs(reloaded["photo"].train - original["photo"].train)) <= 0.5 / 255 + 1e-6

    @pytest.mark.parametrize("kwargs", [
        {"domains": []},
        {"domains": [DomainSource("photo", "synthetic", 1), DomainSource("photo", "synthetic", 1)]},
    ])
    def test_invalid_manifest(self, kwargs):
        with pytest.raises(ConfigurationError):
            DatasetManifest(**kwargs)

    def test_invalid_source(self):
        with pytest.raises(ConfigurationError):
            DomainSource("photo", "synthetic", 0)
        with pytest.raises(ConfigurationError):
            DomainSource("photo", "dir")


class TestPartition:
    def test_dirichlet_counts_sum_to_pool(self):
        counts = dirichlet_partition({"photo": 100, "sketch": 40}, {"photo": 3, "sketch": 2}, 0.5, seed=0)
        assert sum(counts["photo"]) == 100
        assert len(counts["sketch"]) == 2
        assert min(min(c) for c in counts.values()) >= 1
        assert dirichlet_partition({"photo": 100, "sketch": 40}, {"photo": 3, "sketch": 2}, 0.5, seed=0) == counts

    def test_dirichlet_unit_alpha_splits_evenly_on_average(self):
        shares = [dirichlet_partition({"photo": 1000}, {"photo": 2}, 1.0, seed=s)["photo"][0] / 1000
                  for s in range(10000)]
        assert np.mean(shares) == pytest.approx(0.5, abs=0.02)

    def test_dirichlet_pool_too_small(self):
        with pytest.raises(PartitionError):
            dirichlet_partition({"photo": 2}, {"photo": 3}, 0.5, seed=0)

    def test_fixed_tables(self):
        assert sum(len(c) for c in standard_partition().values()) == 10
        assert skewed_partition()["sketch"] == [666, 906]
        assert scale_table(skewed_partition(), 0.1)["photo"] == [21, 6]

    def test_assign_clients(self):
        manifest = DatasetManifest(domains=[DomainSource("photo", "synthetic", 5), DomainSource("art", "synthetic", 5)],
                                   image_size=(16, 16))
        data = build_domain_data(manifest, {"photo": 5, "art": 4})
        clients = assign_clients(data, {"photo": [2, 3], "art": [4]}, seed=0)
        assert [(c.client_id, c.domain, c.count) for c in clients] == [(0, "photo", 2), (1, "photo", 3), (2, "art", 4)]
        merged = np.concatenate([clients[0].images, clients[1].images])
        assert len({im.tobytes() for im in merged}) == 5

    def test_assign_clients_overdrawn(self):
        manifest = DatasetManifest(domains=[DomainSource("photo", "synthetic", 5)], image_size=(16, 16))
        data = build_domain_data(manifest, {"photo": 3})
        with pytest.raises(PartitionError):
            assign_clients(data, {"photo": [2, 2]}, seed=0)

    def test_batch_iter_covers_every_image_once(self):
        images = np.arange(7, dtype=np.float64).reshape(7, 1, 1, 1) * np.ones((7, 3, 2, 2))
        ds = ClientDataset(0, "photo", images)
        batches = list(batch_iter(ds, 3, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [3, 3, 1]
        seen = sorted(float(b[0, 0, 0]) for batch in batches for b in batch)
        assert seen == [float(i) for i in range(7)]
