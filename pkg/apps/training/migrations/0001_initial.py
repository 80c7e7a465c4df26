# Generated by Django 6.0 on 2026-10-17 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('label', models.CharField(max_length=20)),
                ('solver', models.CharField(max_length=20)),
                ('hessian', models.CharField(max_length=20)),
                ('levels', models.PositiveSmallIntegerField(default=1)),
                ('seed', models.IntegerField()),
                ('data_seed', models.IntegerField()),
                ('group', models.CharField(blank=True, db_index=True, default='', max_length=100)),
                ('config', models.JSONField(default=dict)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('RUNNING', 'Running'), ('CONVERGED', 'Converged'), ('BUDGET', 'Work budget exhausted'), ('EPOCH_LIMIT', 'Epoch limit reached'), ('PLATEAU', 'Validation accuracy plateau'), ('DIVERGED', 'Diverged'), ('FAILED', 'Failed')], default='PENDING', max_length=20)),
                ('stop_reason', models.CharField(blank=True, default='', max_length=20)),
                ('work', models.FloatField(blank=True, null=True)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('wall_time', models.FloatField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EpochRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('epoch', models.IntegerField()),
                ('level', models.PositiveSmallIntegerField()),
                ('work', models.FloatField()),
                ('train_loss', models.FloatField()),
                ('val_loss', models.FloatField(blank=True, null=True)),
                ('train_accuracy', models.FloatField(blank=True, null=True)),
                ('val_accuracy', models.FloatField(blank=True, null=True)),
                ('mbs', models.IntegerField()),
                ('delta', models.FloatField()),
                ('rho_g', models.FloatField(blank=True, null=True)),
                ('accepted', models.BooleanField(default=True)),
                ('mbs_changed', models.BooleanField(default=False)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='epochs', to='training.experimentrun')),
            ],
            options={
                'ordering': ['run', 'epoch'],
                'unique_together': {('run', 'epoch')},
            },
        ),
    ]
