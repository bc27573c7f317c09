from dartfx.slad import ConfigurationError, NumericalError, UsageError, synth_dataset
from dartfx.slad.checkpoint import checksum
from dartfx.slad.cka import collect_features, linear_cka
from dartfx.slad.data import DatasetDescriptor, Split, TaskData
from dartfx.slad.heads import DistillConfig, cross_entropy, slad_loss
from dartfx.slad.lora import create_adapters
from dartfx.slad.tensor import backward, parameter, zero_grads
from dartfx.slad.training import (
    BlockMapping,
    OptimConfig,
    OptimState,
    TaskModel,
    TrainingHooks,
    adamw_step,
    block_mapping,
    build_task_model,
    distill_two_step,
    evaluate,
    prepare_slad,
    train_adapt,
    train_probing,
    train_slad,
    trainable_parameter_count,
    views_match_parents,
)
from dartfx.slad.vit import DESK_STUDENT, DESK_TEACHER, Encoder
import numpy as np
import pytest

FAST = OptimConfig(lr=1e-3, batch_size=8)


# block mapping


@pytest.mark.parametrize("kind,n_s,n_t,expected", [
    ("first", 3, 6, [0, 1, 2]),
    ("last", 3, 6, [3, 4, 5]),
    ("even", 3, 6, [0, 2, 4]),
    ("even", 4, 6, [0, 1, 3, 4]),
    ("even", 6, 12, [0, 2, 4, 6, 8, 10]),
    ("even", 6, 6, [0, 1, 2, 3, 4, 5]),
])
def test_block_mapping_examples(kind, n_s, n_t, expected):
    assert block_mapping(kind, n_s, n_t).g == expected


def test_block_mapping_is_injective_and_in_range():
    for n_t in range(1, 33):
        for n_s in range(1, n_t + 1):
            for kind in ("first", "last", "even"):
                g = block_mapping(kind, n_s, n_t).g
                assert len(set(g)) == n_s
                assert all(0 <= t < n_t for t in g)
                assert g == sorted(g)


def test_block_mapping_rejects_deeper_student():
    with pytest.raises(ConfigurationError):
        block_mapping("even", 7, 6)


def test_block_mapping_rejects_unknown_kind():
    with pytest.raises(ConfigurationError):
        block_mapping("middle", 2, 4)


def test_block_mapping_rejects_out_of_range_entries():
    with pytest.raises(ValueError):
        BlockMapping(kind="even", student_depth=2, teacher_depth=2, g=[0, 5])


def test_block_mapping_pairs():
    assert block_mapping("last", 2, 4).pairs() == [(2, 0), (3, 1)]


# optimizer


def test_adamw_first_step_by_hand():
    p = parameter([1.0, -2.0])
    grad = np.array([0.5, -0.1])
    state = OptimState([([p], 0.1)], weight_decay=0.01, total_epochs=1.0)
    adamw_step([p], [grad], state, 0.0)
    # first bias-corrected moments are g and g^2
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * grad / (np.abs(grad) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-12)
    assert state.step == 1


def test_adamw_zero_gradient_is_a_no_op_without_decay():
    p = parameter([0.3, 0.4])
    state = OptimState([([p], 0.1)], weight_decay=0.0)
    adamw_step([p], [np.zeros(2)], state, 0.0)
    assert np.array_equal(p.data, [0.3, 0.4])


def test_adamw_skips_parameters_without_gradient():
    p, q = parameter([0.3, 0.4]), parameter([1.0, 2.0])
    state = OptimState([([p, q], 0.1)], weight_decay=0.5)
    adamw_step([p, q], [None, np.array([0.1, 0.1])], state, 0.0)
    assert np.array_equal(p.data, [0.3, 0.4])
    assert state.param_steps == [0, 1]
    # a late first gradient gets a first-step bias correction
    adamw_step([p, q], [np.array([0.5, -0.1]), None], state, 0.0)
    expected = np.array([0.3, 0.4]) * (1 - 0.1 * 0.5) - 0.1 * np.array([0.5, -0.1]) / (np.array([0.5, 0.1]) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-12)
    assert state.param_steps == [1, 1]


def test_adamw_rejects_non_finite_gradients():
    p = parameter([1.0, 1.0])
    state = OptimState([([p], 0.1)])
    with pytest.raises(NumericalError):
        adamw_step([p], [np.array([np.nan, 0.0])], state, 0.0)
    assert np.array_equal(p.data, [1.0, 1.0])
    assert state.step == 0


def test_adamw_rejects_unregistered_parameters():
    p, q = parameter([1.0]), parameter([2.0])
    state = OptimState([([p], 0.1)])
    with pytest.raises(UsageError):
        adamw_step([q], [np.ones(1)], state, 0.0)


def test_cosine_schedule_endpoints():
    state = OptimState([([parameter([0.0])], 1e-3)], total_epochs=10)
    assert state.learning_rate(1e-3, 0.0) == 1e-3
    assert state.learning_rate(1e-3, 10.0) == 0.0
    assert state.learning_rate(1e-3, 5.0) == pytest.approx(5e-4, abs=1e-15)
    assert state.learning_rate(1e-3, 12.0) == 0.0


def test_parameter_listed_twice_is_registered_once():
    p = parameter(np.zeros(3))
    state = OptimState([([p], 0.1), ([p], 0.2)])
    assert len(state) == 1
    assert state.base_lr == [0.1]


def test_aliasing_parameters_are_rejected():
    p = parameter(np.zeros(4))
    alias = parameter(np.zeros(2))
    alias.data = p.data[:2]
    with pytest.raises(ConfigurationError):
        OptimState([([p, alias], 0.1)])


# single-model strategies


def lora_model(config, classes, role, seed=0, rank=2):
    model = build_task_model(config, classes, role, seed=seed, cls_blocks=2)
    model.adapters = create_adapters(config.dim, config.depth, rank, seed=seed)
    return model


def test_build_task_model_head_widths(tiny_teacher_config):
    model = build_task_model(tiny_teacher_config, 3, "teacher", cls_blocks=2)
    assert model.head.n_in == 2 * tiny_teacher_config.dim
    with pytest.raises(ConfigurationError):
        TaskModel(model.encoder, model.head, cls_blocks=1)


def test_evaluate_empty_split(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    assert evaluate(model, tiny_data.train.subset([])) == (None, None)
    loss, accuracy = evaluate(model, tiny_data.val)
    assert loss > 0 and 0.0 <= accuracy <= 1.0


def test_probing_keeps_encoder_frozen(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    before = checksum(model.encoder.state_dict())
    head_before = checksum(model.head.state_dict())
    metrics, head = train_probing(model, tiny_data, epochs=2, optim=FAST, seed=0)
    assert checksum(model.encoder.state_dict()) == before
    assert checksum(head.state_dict()) != head_before
    assert len(metrics.history) == 2
    assert "student" in metrics.test_accuracy


def test_lora_keeps_encoder_frozen_and_counts_trainables(tiny_teacher_config, tiny_data):
    rank = 2
    model = lora_model(tiny_teacher_config, 3, "teacher", rank=rank)
    before = checksum(model.encoder.state_dict())
    train_adapt(model, tiny_data, epochs=1, mode="lora", optim=FAST)
    assert checksum(model.encoder.state_dict()) == before
    d = tiny_teacher_config.dim
    head = sum(p.size for p in model.head.parameters())
    assert trainable_parameter_count(model) == tiny_teacher_config.depth * rank * (d + 3 * d) + head
    assert any(np.any(a.B.data != 0.0) for a in model.adapters.values())


def test_lora_without_adapters_is_a_configuration_error(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    with pytest.raises(ConfigurationError):
        train_adapt(model, tiny_data, epochs=1, mode="lora", optim=FAST)


def test_full_finetune_moves_encoder(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    before = checksum(model.encoder.state_dict())
    metrics = train_adapt(model, tiny_data, epochs=1, mode="full", optim=FAST)
    assert checksum(model.encoder.state_dict()) != before
    assert metrics.passes["student"].forward == len(tiny_data.train)


def test_training_is_deterministic(tiny_student_config, tiny_data):
    def run():
        model = lora_model(tiny_student_config, 3, "student", seed=4)
        metrics = train_adapt(model, tiny_data, epochs=2, mode="lora", optim=FAST, seed=4)
        return metrics, checksum({f"{i}.B": a.B for i, a in model.adapters.items()})

    (m1, c1), (m2, c2) = run(), run()
    assert c1 == c2
    assert [h.train_loss for h in m1.history] == [h.train_loss for h in m2.history]


def separable_data(per_class=16, seed=0):
    """Three classes of near-constant images at -1, 0 and +1."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), per_class)
    images = (labels - 1.0)[:, None, None, None] + 0.01 * rng.normal(size=(len(labels), 8, 8, 3))
    train = Split(images, labels.astype(np.int64))
    empty = train.subset([])
    return TaskData(DatasetDescriptor(num_classes=3, image_size=8), train, empty, train)


def test_probing_fits_linearly_separable_features(tiny_student_config):
    data = separable_data()
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    metrics, _ = train_probing(model, data, epochs=40, optim=OptimConfig(lr=1e-2, batch_size=8), seed=0)
    _, accuracy = evaluate(model, data.train)
    assert accuracy >= 0.99
    losses = [m.train_loss for m in metrics.history]
    assert np.mean(losses[-3:]) <= np.mean(losses[:3])


def test_probing_leaves_representations_unchanged(tiny_student_config, tiny_data):
    model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
    initial = collect_features(build_task_model(tiny_student_config, 3, "student", cls_blocks=2), tiny_data.test.images)
    train_probing(model, tiny_data, epochs=2, optim=FAST, seed=0)
    after = collect_features(model, tiny_data.test.images)
    for before, now in zip(initial, after):
        assert linear_cka(before, now) == pytest.approx(1.0, abs=1e-10)


def test_full_finetune_fits_training_data_better_than_probing(tiny_student_config, tiny_data):
    optim = OptimConfig(lr=1e-3, finetune_lr=1e-3, batch_size=8)
    losses = {}
    for mode in ("probe", "full"):
        model = build_task_model(tiny_student_config, 3, "student", cls_blocks=2)
        train_adapt(model, tiny_data, epochs=8, mode=mode, optim=optim, seed=0)
        losses[mode], _ = evaluate(model, tiny_data.train)
    assert losses["full"] < losses["probe"]


# two-step distillation


def test_distillation_without_kl_matches_plain_adaptation(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher = lora_model(tiny_teacher_config, 3, "teacher", seed=1)
    plain = lora_model(tiny_student_config, 3, "student", seed=2)
    distilled = lora_model(tiny_student_config, 3, "student", seed=2)
    cfg = DistillConfig(temperature=2.0, alpha_s=1.0, alpha_t=0.0, alpha_kl=0.0)
    train_adapt(plain, tiny_data, epochs=2, mode="lora", optim=FAST, seed=7)
    distill_two_step(teacher, distilled, tiny_data, epochs=2, cfg=cfg, student_mode="lora", optim=FAST, seed=7)
    for index in plain.adapters:
        assert plain.adapters[index].B.data.tobytes() == distilled.adapters[index].B.data.tobytes()
    assert plain.head.fc2_weight.data.tobytes() == distilled.head.fc2_weight.data.tobytes()


def test_distillation_leaves_teacher_untouched(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher = lora_model(tiny_teacher_config, 3, "teacher", seed=1)
    student = lora_model(tiny_student_config, 3, "student", seed=2)
    state = {**teacher.encoder.state_dict(), **{f"head.{k}": v for k, v in teacher.head.state_dict().items()},
             **{f"adapter.{i}.A": a.A for i, a in teacher.adapters.items()}}
    before = checksum(state)
    metrics = distill_two_step(teacher, student, tiny_data, epochs=1, optim=FAST)
    state = {**teacher.encoder.state_dict(), **{f"head.{k}": v for k, v in teacher.head.state_dict().items()},
             **{f"adapter.{i}.A": a.A for i, a in teacher.adapters.items()}}
    assert checksum(state) == before
    n = len(tiny_data.train)
    assert metrics.passes["teacher"].forward == n
    assert metrics.passes["teacher"].backward == 0
    assert metrics.passes["student"].forward == n
    assert metrics.passes["student"].backward == n


def test_distillation_rejects_class_mismatch(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher = lora_model(tiny_teacher_config, 4, "teacher")
    student = lora_model(tiny_student_config, 3, "student")
    with pytest.raises(ConfigurationError):
        distill_two_step(teacher, student, tiny_data, epochs=1, optim=FAST)


# SLAD


def slad_pair(teacher_config, student_config, classes, seed=0, rank=2, kind="even"):
    teacher_encoder, student_encoder = Encoder(teacher_config), Encoder(student_config)
    mapping = block_mapping(kind, student_config.depth, teacher_config.depth)
    teacher_adapters, views = prepare_slad(teacher_encoder, student_encoder, rank, mapping, seed=seed)
    teacher = build_task_model(teacher_config, classes, "teacher", seed=seed, cls_blocks=2, encoder=teacher_encoder)
    student = build_task_model(student_config, classes, "student", seed=seed + 1, cls_blocks=2, encoder=student_encoder)
    teacher.adapters, student.adapters = teacher_adapters, views
    return teacher, student, mapping


def test_shared_views_stay_identical_to_parents_through_training():
    data = synth_dataset(classes=2, per_class=25, image_size=32, seed=3, test_per_class=5)
    teacher, student, mapping = slad_pair(DESK_TEACHER, DESK_STUDENT, 2, seed=3, rank=4)
    teacher_before = checksum(teacher.encoder.state_dict())
    student_before = checksum(student.encoder.state_dict())
    metrics = train_slad(teacher, student, data, epochs=20, mapping=mapping, optim=OptimConfig(batch_size=9), seed=3)
    steps = 20 * int(np.ceil(len(data.train) / 9))
    assert steps == 100
    assert views_match_parents(student.adapters)
    assert any(np.any(a.B.data != 0.0) for a in teacher.adapters.values())
    assert checksum(teacher.encoder.state_dict()) == teacher_before
    assert checksum(student.encoder.state_dict()) == student_before
    assert set(metrics.test_accuracy) == {"teacher", "student"}


def test_shared_adapter_gradient_is_the_sum_of_both_paths(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, _ = slad_pair(tiny_teacher_config, tiny_student_config, 3, seed=1)
    rng = np.random.default_rng(0)
    for adapter in teacher.adapters.values():
        adapter.B.data[...] = rng.normal(scale=0.1, size=adapter.B.shape)
    images, labels = tiny_data.train.images[:6], tiny_data.train.labels[:6]
    shared = teacher.adapter_parameters()

    def gradients(loss_fn):
        zero_grads(shared)
        backward(loss_fn())
        return [p.grad.copy() for p in shared]

    cfg = DistillConfig(alpha_s=1.0, alpha_t=1.0, alpha_kl=1.0)
    joint = gradients(lambda: slad_loss(student(images), teacher(images), labels, cfg))
    teacher_only = gradients(lambda: cross_entropy(teacher(images), labels))
    student_cfg = DistillConfig(alpha_s=1.0, alpha_t=0.0, alpha_kl=1.0)
    student_only = gradients(lambda: slad_loss(student(images), teacher(images), labels, student_cfg))
    for g, gt, gs in zip(joint, teacher_only, student_only):
        assert np.max(np.abs(g - (gt + gs))) <= 1e-12


def test_teacher_head_gets_no_gradient_without_teacher_terms(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, _ = slad_pair(tiny_teacher_config, tiny_student_config, 3, seed=2)
    images, labels = tiny_data.train.images[:4], tiny_data.train.labels[:4]
    zero_grads(teacher.head.parameters())
    cfg = DistillConfig(alpha_s=1.0, alpha_t=0.0, alpha_kl=0.0)
    backward(slad_loss(student(images), teacher(images), labels, cfg))
    for p in teacher.head.parameters():
        assert p.grad is None or np.all(p.grad == 0.0)


def test_teacher_head_stays_fixed_without_teacher_terms(tiny_teacher_config, tiny_student_config, tiny_data):
    deeper = tiny_teacher_config.model_copy(update={"depth": 3})
    teacher, student, mapping = slad_pair(deeper, tiny_student_config, 3, seed=2, kind="first")
    head_before = checksum(teacher.head.state_dict())
    unmapped = [i for i in teacher.adapters if i not in set(mapping.g)]
    assert unmapped == [2]

    def factors(i):
        return checksum({"A": teacher.adapters[i].A.data, "B": teacher.adapters[i].B.data})

    adapters_before = {i: factors(i) for i in unmapped}
    student_head_before = checksum(student.head.state_dict())
    cfg = DistillConfig(alpha_s=1.0, alpha_t=0.0, alpha_kl=0.0)
    train_slad(teacher, student, tiny_data, epochs=2, mapping=mapping, cfg=cfg, optim=OptimConfig(batch_size=8, weight_decay=0.1))
    assert checksum(teacher.head.state_dict()) == head_before
    assert {i: factors(i) for i in unmapped} == adapters_before
    assert checksum(student.head.state_dict()) != student_head_before


def test_slad_rejects_mismatched_mapping(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, _ = slad_pair(tiny_teacher_config, tiny_student_config, 3)
    wrong = block_mapping("first", 1, 2)
    with pytest.raises(ConfigurationError):
        train_slad(teacher, student, tiny_data, epochs=1, mapping=wrong, optim=FAST)


def test_slad_rejects_unshared_student(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, mapping = slad_pair(tiny_teacher_config, tiny_student_config, 3)
    student.adapters = create_adapters(tiny_student_config.dim, tiny_student_config.depth, 2)
    with pytest.raises(ConfigurationError):
        train_slad(teacher, student, tiny_data, epochs=1, mapping=mapping, optim=FAST)


def test_prepare_slad_rejects_mapping_for_other_depths(tiny_teacher_config, tiny_student_config):
    with pytest.raises(ConfigurationError):
        prepare_slad(Encoder(tiny_teacher_config), Encoder(tiny_student_config), 2, block_mapping("even", 2, 4))


def test_slad_uses_fewer_passes_than_two_step(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, mapping = slad_pair(tiny_teacher_config, tiny_student_config, 3)
    slad = train_slad(teacher, student, tiny_data, epochs=1, mapping=mapping, optim=FAST)

    two_teacher = lora_model(tiny_teacher_config, 3, "teacher")
    two_student = lora_model(tiny_student_config, 3, "student")
    stage_one = train_adapt(two_teacher, tiny_data, epochs=1, mode="lora", optim=FAST)
    stage_two = distill_two_step(two_teacher, two_student, tiny_data, epochs=1, optim=FAST)
    two_step = stage_one.merge(stage_two, strategy="distill-two-step")

    n = len(tiny_data.train)
    assert slad.forward_passes == 2 * n
    assert slad.backward_passes == 2 * n
    assert two_step.forward_passes == 3 * n
    assert two_step.backward_passes == 2 * n
    assert slad.total_passes < two_step.total_passes


def test_slad_history_has_both_roles(tiny_teacher_config, tiny_student_config, tiny_data):
    teacher, student, mapping = slad_pair(tiny_teacher_config, tiny_student_config, 3)
    seen = []
    metrics = train_slad(teacher, student, tiny_data, epochs=2, mapping=mapping, optim=FAST,
                         hooks=TrainingHooks(on_epoch=seen.append))
    assert [m.role for m in metrics.history] == ["teacher", "student", "teacher", "student"]
    assert len(seen) == 4
    assert metrics.role_history("student")[-1].epoch == 1


def test_slad_student_train_loss_is_its_own_cross_entropy(tiny_teacher_config, tiny_student_config, tiny_data):
    # Adam is invariant to the loss scale, so tripling alpha_s leaves the trajectory unchanged
    def student_losses(alpha_s):
        teacher, student, mapping = slad_pair(tiny_teacher_config, tiny_student_config, 3, seed=4)
        cfg = DistillConfig(alpha_s=alpha_s, alpha_t=0.0, alpha_kl=0.0)
        metrics = train_slad(teacher, student, tiny_data, epochs=2, mapping=mapping, cfg=cfg, optim=FAST)
        return [m.train_loss for m in metrics.role_history("student")]

    single, tripled = student_losses(1.0), student_losses(3.0)
    assert tripled == pytest.approx(single, rel=1e-6)
