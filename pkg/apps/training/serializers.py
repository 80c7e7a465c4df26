from rest_framework import serializers
from rest_framework.exceptions import ValidationError

from .datasets import GENERATORS
from .hierarchy import REFINEMENT_RULES
from .models import EpochRecord, ExperimentRun
from .resnet import ACTIVATIONS
from .rmtr import COHERENCE_MODES

SOLVERS = ('TR', 'RMTR_V', 'RMTR_F', 'DSS_TR', 'DSS_RMTR')
HESSIANS = ('CP', 'LSR1_overlap', 'LSR1_sampled')


def parse_seeds(value):
    """'1..5' -> (1, 2, 3, 4, 5); '1,4,9' -> (1, 4, 9)."""
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    if not text:
        return ()
    if '..' in text:
        start, stop = (int(part) for part in text.split('..', 1))
        if stop < start:
            raise ValueError(f"Empty seed range '{text}'")
        return tuple(range(start, stop + 1))
    return tuple(int(part) for part in text.split(',') if part.strip())


class StrictSectionSerializer(serializers.Serializer):
    """Rejects keys the section does not declare."""

    def to_internal_value(self, data):
        unknown = sorted(set(data) - set(self.fields)) if isinstance(data, dict) else []
        if unknown:
            raise ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


class DatasetSpecSerializer(StrictSectionSerializer):
    generator = serializers.ChoiceField(choices=GENERATORS, default='smiley')
    n = serializers.IntegerField(min_value=1, default=7000)
    seed = serializers.IntegerField(min_value=0, default=0)
    n_train = serializers.IntegerField(min_value=1, default=5000)
    csv_path = serializers.CharField(allow_blank=True, allow_null=True, default='')
    standardize = serializers.BooleanField(default=True)
    standardize_targets = serializers.BooleanField(default=False)

    def validate(self, attrs):
        if not attrs['csv_path'] and attrs['n_train'] > attrs['n']:
            raise ValidationError({'n_train': ['Training split cannot exceed the dataset size.']})
        return attrs


class NetworkSpecSerializer(StrictSectionSerializer):
    width = serializers.IntegerField(min_value=1, default=10)
    K = serializers.IntegerField(min_value=1, default=7)
    T = serializers.FloatField(min_value=0.0, default=1.0)
    activation = serializers.ChoiceField(choices=ACTIVATIONS, default='tanh')
    beta1 = serializers.FloatField(min_value=0.0, default=1e-4)
    beta2 = serializers.FloatField(min_value=0.0, default=1e-4)
    levels = serializers.IntegerField(min_value=1, default=1)
    refinement_rule = serializers.ChoiceField(choices=REFINEMENT_RULES, default='interval_doubling')

    def validate_T(self, value):
        if value <= 0:
            raise ValidationError('Final time must be positive.')
        return value


class SolverSpecSerializer(StrictSectionSerializer):
    solver = serializers.ChoiceField(choices=SOLVERS, default='TR')
    hessian = serializers.ChoiceField(choices=HESSIANS, default='LSR1_overlap')
    mu1 = serializers.IntegerField(min_value=0, default=1)
    mu2 = serializers.IntegerField(min_value=0, default=1)
    mu_coarse = serializers.IntegerField(min_value=0, default=1)
    cycles_per_level = serializers.IntegerField(min_value=1, default=100)
    level_gtol = serializers.FloatField(min_value=0.0, max_value=0.999, default=1e-2)
    coherence = serializers.ChoiceField(choices=COHERENCE_MODES, default='assert')


class ControlSpecSerializer(StrictSectionSerializer):
    eta1 = serializers.FloatField(default=0.1)
    eta2 = serializers.FloatField(default=0.75)
    gamma1 = serializers.FloatField(default=0.5)
    gamma2 = serializers.FloatField(default=2.0)
    delta0 = serializers.FloatField(default=1.0)
    delta_max = serializers.FloatField(default=100.0)
    zeta1 = serializers.FloatField(default=0.1)
    zeta2 = serializers.FloatField(default=0.0)
    omega = serializers.FloatField(default=2.0)

    def validate(self, attrs):
        errors = {}
        if not 0 < attrs['eta1'] <= attrs['eta2'] < 1:
            errors['eta1'] = ['Require 0 < eta1 <= eta2 < 1.']
        if not 0 < attrs['gamma1'] < 1 < attrs['gamma2']:
            errors['gamma1'] = ['Require 0 < gamma1 < 1 < gamma2.']
        if not 0 < attrs['delta0'] <= attrs['delta_max']:
            errors['delta0'] = ['Require 0 < delta0 <= delta_max.']
        if not attrs['zeta1'] > 0:
            errors['zeta1'] = ['Must be positive.']
        if not 0 <= attrs['zeta2'] <= 0.2:
            errors['zeta2'] = ['Must lie in [0, 0.2].']
        if not attrs['omega'] > 1:
            errors['omega'] = ['Must exceed 1.']
        if errors:
            raise ValidationError(errors)
        return attrs


class SamplingSpecSerializer(StrictSectionSerializer):
    mbs0 = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    overlap = serializers.FloatField(min_value=0.0, max_value=0.5, default=0.2)
    global_period = serializers.IntegerField(min_value=1, default=1)
    memory_size = serializers.IntegerField(min_value=1, allow_null=True, default=None)


class StoppingSpecSerializer(StrictSectionSerializer):
    accuracy = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.98)
    work_max = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    epoch_max = serializers.IntegerField(min_value=0, default=500)
    plateau_epochs = serializers.IntegerField(min_value=0, default=0)


class ReplicationSpecSerializer(StrictSectionSerializer):
    seed = serializers.IntegerField(min_value=0, default=1)
    seeds = serializers.CharField(allow_blank=True, allow_null=True, default='')

    def validate_seeds(self, value):
        try:
            return parse_seeds(value)
        except ValueError as exc:
            raise ValidationError(f"Invalid seed list: {exc}")


class ExperimentConfigSerializer(StrictSectionSerializer):
    dataset = DatasetSpecSerializer()
    network = NetworkSpecSerializer()
    solver = SolverSpecSerializer()
    control = ControlSpecSerializer()
    sampling = SamplingSpecSerializer()
    stopping = StoppingSpecSerializer()
    replication = ReplicationSpecSerializer()

    def to_internal_value(self, data):
        # absent sections take their defaults
        if isinstance(data, dict):
            data = {**{name: {} for name in self.fields}, **data}
        return super().to_internal_value(data)


def flatten_errors(errors, prefix=''):
    """DRF error tree -> {'section.field': [messages]}."""
    flat = {}
    if isinstance(errors, dict):
        for key, value in errors.items():
            name = '' if key == 'non_field_errors' else key
            flat.update(flatten_errors(value, '.'.join(part for part in (prefix, name) if part)))
    else:
        flat[prefix or 'config'] = [str(message) for message in errors]
    return flat


class EpochRecordSerializer(serializers.ModelSerializer):
    class Meta:
        model = EpochRecord
        fields = [
            'epoch', 'level', 'work', 'train_loss', 'val_loss', 'train_accuracy', 'val_accuracy',
            'mbs', 'delta', 'rho_g', 'accepted', 'mbs_changed',
        ]


class ExperimentRunSerializer(serializers.ModelSerializer):
    status_display = serializers.CharField(source='get_status_display', read_only=True)

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'label', 'solver', 'hessian', 'levels', 'seed', 'data_seed', 'group', 'status',
            'status_display', 'stop_reason', 'work', 'metrics', 'wall_time', 'error_message', 'created_at',
        ]
        read_only_fields = fields


class ExperimentRunDetailSerializer(ExperimentRunSerializer):
    epochs = EpochRecordSerializer(many=True, read_only=True)

    class Meta(ExperimentRunSerializer.Meta):
        fields = ExperimentRunSerializer.Meta.fields + ['config', 'epochs']
        read_only_fields = fields
