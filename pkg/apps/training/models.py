from django.db import models


class ExperimentRun(models.Model):
    class Status(models.TextChoices):
        PENDING = 'PENDING', 'Pending'
        RUNNING = 'RUNNING', 'Running'
        CONVERGED = 'CONVERGED', 'Converged'
        BUDGET = 'BUDGET', 'Work budget exhausted'
        EPOCH_LIMIT = 'EPOCH_LIMIT', 'Epoch limit reached'
        PLATEAU = 'PLATEAU', 'Validation accuracy plateau'
        DIVERGED = 'DIVERGED', 'Diverged'
        FAILED = 'FAILED', 'Failed'

    label = models.CharField(max_length=20)
    solver = models.CharField(max_length=20)
    hessian = models.CharField(max_length=20)
    levels = models.PositiveSmallIntegerField(default=1)
    seed = models.IntegerField()
    data_seed = models.IntegerField()
    group = models.CharField(max_length=100, blank=True, default='', db_index=True)

    # Effective configuration as flat section.field -> value
    config = models.JSONField(default=dict)

    status = models.CharField(
        max_length=20,
        choices=Status.choices,
        default=Status.PENDING
    )
    stop_reason = models.CharField(max_length=20, blank=True, default='')
    work = models.FloatField(null=True, blank=True)
    metrics = models.JSONField(default=dict, blank=True)
    wall_time = models.FloatField(null=True, blank=True)
    error_message = models.TextField(blank=True, default='')

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.label} seed={self.seed} ({self.status})"


class EpochRecord(models.Model):
    """One row of a run log: an epoch, or one V-cycle in deterministic mode."""
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='epochs')
    epoch = models.IntegerField()
    level = models.PositiveSmallIntegerField()
    work = models.FloatField()
    train_loss = models.FloatField()
    val_loss = models.FloatField(null=True, blank=True)
    train_accuracy = models.FloatField(null=True, blank=True)
    val_accuracy = models.FloatField(null=True, blank=True)
    mbs = models.IntegerField()
    delta = models.FloatField()
    rho_g = models.FloatField(null=True, blank=True)
    accepted = models.BooleanField(default=True)
    mbs_changed = models.BooleanField(default=False)

    class Meta:
        ordering = ['run', 'epoch']
        unique_together = [['run', 'epoch']]

    def __str__(self):
        return f"Epoch {self.epoch} of run {self.run_id}"
