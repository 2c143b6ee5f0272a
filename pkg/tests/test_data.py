"""Synthetic generator, binary container and split behavior.

The generator checks include distribution-level oracles: template decoding
against the true class signatures must hit chance on a fully-overlapped
modality and near-perfect accuracy on a separable one.
"""

from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from timefuse.data import (
    BadMagicError,
    ConfusablePair,
    ContainerFormatError,
    GeneratorSpec,
    Session,
    SplitSpec,
    TruncatedStreamError,
    UnsupportedVersionError,
    _scene_statistics,
    _video_signature,
    _brain_signature,
    generate_dataset,
    generate_session,
    load_dataset,
    make_splits,
    save_dataset,
    scene_of_subject,
    session_filename,
    session_from_bytes,
    session_to_bytes,
    split_sessions,
)
from timefuse.timeline import ACTION_VERB_IDS, CONSUME_ACTION_IDS


SMALL = GeneratorSpec(seed=11, subjects=2, scenes=1, actions_per_session=3, max_action_s=4.0)


class TestGenerator:
    def test_deterministic(self):
        a = generate_session(SMALL, 0, 0, 0)
        b = generate_session(SMALL, 0, 0, 0)
        assert session_to_bytes(a) == session_to_bytes(b)

    def test_identity_changes_content(self):
        a = generate_session(SMALL, 0, 0, 0)
        b = generate_session(SMALL, 1, 0, 0)
        c = generate_session(SMALL, 0, 0, 1)
        assert not np.array_equal(a.video.frames, b.video.frames)
        assert not np.array_equal(a.video.frames, c.video.frames)

    def test_streams_match_timeline(self):
        session = generate_session(SMALL, 0, 0, 0)
        assert session.video.frame_count == session.timeline.frame_count()
        assert session.signal.length == session.timeline.sample_count()
        assert session.labels.end_ms() < session.timeline.duration_ms
        assert session.video.frames.dtype == np.float32
        assert float(session.video.frames.min()) >= 0.0
        assert float(session.video.frames.max()) <= 1.0

    def test_script_action_counts_exact(self):
        spec = GeneratorSpec(seed=3, subjects=4, scenes=1, max_action_s=3.0)
        counts = {}
        for session in generate_dataset(spec):
            for span in session.labels.spans:
                counts[span.action_id] = counts.get(span.action_id, 0) + 1
        for action in range(len(ACTION_VERB_IDS)):
            expected = spec.consume_repeats if action in CONSUME_ACTION_IDS else 1
            assert counts.get(action, 0) == expected * spec.subjects, action

    def test_action_pool_restricts_script(self):
        spec = replace(SMALL, action_pool=(0, 5, 20), actions_per_session=6)
        session = generate_session(spec, 0, 0, 0)
        assert {span.action_id for span in session.labels.spans} <= {0, 5, 20}
        assert len(session.labels.spans) == 6

    def test_verb_ids_consistent(self):
        session = generate_session(SMALL, 0, 0, 0)
        for span in session.labels.spans:
            assert span.verb_id == ACTION_VERB_IDS[span.action_id]

    def test_scene_assignment_blocks(self):
        spec = GeneratorSpec(seed=0, subjects=20, scenes=2)
        scenes = [scene_of_subject(spec, s) for s in range(20)]
        assert scenes == [0] * 10 + [1] * 10
        spec3 = GeneratorSpec(seed=0, subjects=7, scenes=3)
        scenes3 = [scene_of_subject(spec3, s) for s in range(7)]
        assert scenes3 == sorted(scenes3)
        assert set(scenes3) == {0, 1, 2}

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GeneratorSpec(min_action_s=5.0, max_action_s=2.0)
        with pytest.raises(ValueError):
            GeneratorSpec(action_pool=())
        with pytest.raises(ValueError):
            GeneratorSpec(
                confusable_pairs=(
                    ConfusablePair(0, 1, 0.5, 0.5),
                    ConfusablePair(1, 0, 0.2, 0.2),
                )
            )
        with pytest.raises(ValueError):
            ConfusablePair(0, 0, 0.5, 0.5)
        with pytest.raises(ValueError):
            ConfusablePair(0, 1, 1.5, 0.5)


def _template_accuracy(sessions, pair, modality: str, spec: GeneratorSpec) -> float:
    """Decode each labeled instance by correlating span-mean evidence with
    the per-action signatures; returns accuracy over all pair instances."""
    a, b = pair
    correct = 0
    total = 0
    for session in sessions:
        background, baseline = _scene_statistics(spec, session.scene_id)
        if modality == "visual":
            times = (np.arange(session.video.frame_count) + 0.5) / float(session.timeline.video_rate)
            sig_a = _video_signature(spec, a).ravel()
            sig_b = _video_signature(spec, b).ravel()
        else:
            times = np.arange(session.signal.length) / float(session.timeline.signal_rate)
            sig_a = _brain_signature(spec, a)
            sig_b = _brain_signature(spec, b)
        for span in session.labels.spans:
            active = (times >= span.start_s) & (times < span.end_s)
            if modality == "visual":
                evidence = session.video.frames[active].mean(axis=0).ravel() - background.ravel()
            else:
                evidence = session.signal.samples[:, active].mean(axis=1) - baseline
            prediction = a if float(evidence @ sig_a) >= float(evidence @ sig_b) else b
            correct += prediction == span.action_id
            total += 1
    return correct / total


class TestComplementarity:
    spec = GeneratorSpec(
        seed=29,
        subjects=60,
        scenes=1,
        action_pool=(0, 1),
        confusable_pairs=(ConfusablePair(0, 1, 1.0, 0.0),),
        min_action_s=2.0,
        max_action_s=4.0,
    )

    def test_full_visual_overlap_hits_chance(self):
        sessions = generate_dataset(self.spec)
        accuracy = _template_accuracy(sessions, (0, 1), "visual", self.spec)
        assert 0.44 <= accuracy <= 0.56, accuracy

    def test_brain_stays_separable(self):
        sessions = generate_dataset(self.spec)
        accuracy = _template_accuracy(sessions, (0, 1), "brain", self.spec)
        assert accuracy >= 0.97, accuracy

    def test_no_overlap_visual_separable(self):
        spec = replace(self.spec, confusable_pairs=(ConfusablePair(0, 1, 0.0, 0.0),), subjects=30)
        sessions = generate_dataset(spec)
        accuracy = _template_accuracy(sessions, (0, 1), "visual", spec)
        assert accuracy >= 0.97, accuracy


class TestContainer:
    def test_round_trip_bitwise(self):
        session = generate_session(SMALL, 1, 0, 0)
        blob = session_to_bytes(session)
        back = session_from_bytes(blob)
        assert session_to_bytes(back) == blob
        np.testing.assert_array_equal(back.video.frames, session.video.frames)
        np.testing.assert_array_equal(back.signal.samples, session.signal.samples)
        assert back.labels == session.labels
        assert back.timeline == session.timeline

    def test_bad_magic(self):
        blob = session_to_bytes(generate_session(SMALL, 0, 0, 0))
        with pytest.raises(BadMagicError):
            session_from_bytes(b"XXXX" + blob[4:])

    def test_unsupported_version(self):
        blob = bytearray(session_to_bytes(generate_session(SMALL, 0, 0, 0)))
        blob[4:6] = (99).to_bytes(2, "little")
        with pytest.raises(UnsupportedVersionError):
            session_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = session_to_bytes(generate_session(SMALL, 0, 0, 0))
        with pytest.raises(TruncatedStreamError):
            session_from_bytes(blob[: len(blob) // 2])
        with pytest.raises(TruncatedStreamError):
            session_from_bytes(blob[:2])

    def test_unknown_block_tag(self):
        session = generate_session(SMALL, 0, 0, 0)
        stripped = replace(session, video=None, signal=None)
        blob = session_to_bytes(stripped)
        import struct

        extra = struct.pack("<4sQ", b"JUNK", 0)
        with pytest.raises(ContainerFormatError):
            session_from_bytes(blob + extra)

    def test_errors_share_base_class(self):
        assert issubclass(BadMagicError, ContainerFormatError)
        assert issubclass(UnsupportedVersionError, ContainerFormatError)
        assert issubclass(TruncatedStreamError, ContainerFormatError)
        assert issubclass(ContainerFormatError, ValueError)

    def test_filename(self):
        session = generate_session(SMALL, 1, 0, 0)
        assert session_filename(session) == "subject1_scene0_sess0.egbr"


class TestDatasetDirectory:
    def test_save_load_round_trip(self, tmp_path):
        sessions = generate_dataset(SMALL)
        save_dataset(sessions, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        assert len(loaded) == len(sessions)
        for original, back in zip(sessions, loaded):
            assert session_to_bytes(back) == session_to_bytes(original)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_manifest_header_checked(self, tmp_path):
        directory = tmp_path / "data"
        directory.mkdir()
        (directory / "manifest.csv").write_text("wrong,columns\n")
        with pytest.raises(ContainerFormatError):
            load_dataset(directory)


def _stub_sessions(n_subjects: int, scenes: int = 2):
    sessions = []
    for subject in range(n_subjects):
        scene = min(scenes - 1, subject * scenes // n_subjects)
        sessions.append(SimpleNamespace(subject_id=subject, scene_id=scene))
    return sessions


class TestSplits:
    def test_cross_subject_34(self):
        split = make_splits(_stub_sessions(34), "cross_subject")
        assert len(split.train_subjects) == 22
        assert len(split.val_subjects) == 6
        assert len(split.test_subjects) == 6

    def test_cross_subject_10(self):
        split = make_splits(_stub_sessions(10), "cross_subject")
        assert (len(split.train_subjects), len(split.val_subjects), len(split.test_subjects)) == (6, 2, 2)

    def test_cross_subject_minimum(self):
        split = make_splits(_stub_sessions(5), "cross_subject")
        assert min(
            len(split.train_subjects), len(split.val_subjects), len(split.test_subjects)
        ) >= 1
        with pytest.raises(ValueError):
            make_splits(_stub_sessions(4), "cross_subject")

    def test_subjects_disjoint_and_complete(self):
        split = make_splits(_stub_sessions(20), "cross_subject")
        groups = [set(split.train_subjects), set(split.val_subjects), set(split.test_subjects)]
        assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])
        assert groups[0] | groups[1] | groups[2] == set(range(20))

    def test_cross_scene_holds_out_scene(self):
        sessions = _stub_sessions(20, scenes=2)
        split = make_splits(sessions, "cross_subject_scene")
        assert split.test_scenes == (1,)
        test_subjects = {s.subject_id for s in sessions if s.scene_id == 1}
        assert set(split.test_subjects) == test_subjects
        train, val, test = split_sessions(sessions, split)
        assert {s.scene_id for s in train + val} == {0}
        assert {s.scene_id for s in test} == {1}

    def test_cross_scene_needs_two_scenes(self):
        with pytest.raises(ValueError):
            make_splits(_stub_sessions(10, scenes=1), "cross_subject_scene")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            make_splits(_stub_sessions(10), "leave_one_out")

    def test_split_spec_rejects_overlap(self):
        with pytest.raises(ValueError):
            SplitSpec(
                mode="cross_subject",
                train_subjects=(0, 1),
                val_subjects=(1, 2),
                test_subjects=(3,),
            )

    def test_split_sessions_rejects_empty_part(self):
        sessions = _stub_sessions(6)
        split = SplitSpec(
            mode="cross_subject",
            train_subjects=(0, 1, 2, 3),
            val_subjects=(4,),
            test_subjects=(99,),
        )
        with pytest.raises(ValueError):
            split_sessions(sessions, split)


class TestSessionValidation:
    def test_mismatched_channels_rejected(self):
        session = generate_session(SMALL, 0, 0, 0)
        with pytest.raises(ValueError):
            replace(session, channels=session.channels + 1)

    def test_label_past_duration_rejected(self):
        from timefuse.timeline import LabelSpan, LabelTrack

        session = generate_session(SMALL, 0, 0, 0)
        far = LabelTrack(
            spans=(
                LabelSpan(
                    start_ms=session.timeline.duration_ms,
                    end_ms=session.timeline.duration_ms + 1000,
                    verb_id=int(ACTION_VERB_IDS[0]),
                    action_id=0,
                ),
            )
        )
        with pytest.raises(ValueError):
            replace(session, labels=far)
