from celery import shared_task
from django.conf import settings
from pathlib import Path
import logging

from .exceptions import TrainingError
from .experiments import config_from_run, run_experiment, store_record
from .models import ExperimentRun

logger = logging.getLogger(__name__)


@shared_task
def execute_run(run_id):
    """Run a stored PENDING experiment and persist its record; the run is marked FAILED on error."""
    run = None
    try:
        run = ExperimentRun.objects.get(id=run_id)
        if run.status != ExperimentRun.Status.PENDING:
            logger.warning(f"Run {run_id} is {run.status}, not pending; skipping")
            return run.status
        run.status = ExperimentRun.Status.RUNNING
        run.save(update_fields=['status', 'updated_at'])

        config = config_from_run(run)
        record = run_experiment(config, seed=run.seed)
        output_dir = getattr(settings, 'TRAINING_OUTPUT_DIR', None)
        if output_dir:
            record.write(Path(output_dir) / (run.group or 'ungrouped') / f"run-{run.id}")
        store_record(run, record)
        logger.info(f"Run {run_id} finished with status {run.status} (W={run.work:.4f})")
        return run.status

    except ExperimentRun.DoesNotExist:
        logger.error(f"Run {run_id} not found.")
    except (TrainingError, ValueError) as e:
        logger.error(f"Run {run_id} failed: {e}")
        if run is not None:
            run.status = ExperimentRun.Status.FAILED
            run.error_message = str(e)
            run.save(update_fields=['status', 'error_message', 'updated_at'])
            return run.status
