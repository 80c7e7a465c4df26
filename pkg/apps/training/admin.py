from django.contrib import admin
from .models import EpochRecord, ExperimentRun


class EpochRecordInline(admin.TabularInline):
    model = EpochRecord
    extra = 0
    can_delete = False
    readonly_fields = [
        'epoch', 'level', 'work', 'train_loss', 'val_loss', 'train_accuracy', 'val_accuracy',
        'mbs', 'delta', 'rho_g', 'accepted', 'mbs_changed',
    ]


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['label', 'levels', 'hessian', 'seed', 'group', 'status', 'work', 'created_at']
    list_filter = ['status', 'label', 'hessian', 'group']
    search_fields = ['group', 'label']
    readonly_fields = ['created_at', 'updated_at', 'config', 'metrics', 'wall_time', 'error_message']
    inlines = [EpochRecordInline]
