# Generated by Django 4.2.16 on 2026-10-17 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EvaluationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('arch', models.CharField(default='oracle', max_length=20)),
                ('alpha', models.FloatField(blank=True, null=True)),
                ('episodes', models.PositiveIntegerField()),
                ('seed', models.BigIntegerField(default=0)),
                ('success_rate', models.FloatField()),
                ('avg_attempts', models.FloatField()),
                ('avg_excess_force', models.FloatField(blank=True, null=True)),
                ('std_attempts', models.FloatField(blank=True, null=True)),
                ('report_path', models.CharField(blank=True, max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('arch', models.CharField(choices=[('transformer', 'Transformer'), ('cnn', 'CNN')], max_length=20)),
                ('alpha', models.FloatField()),
                ('seed', models.BigIntegerField(default=0)),
                ('out_dir', models.CharField(max_length=500)),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('env_steps', models.PositiveIntegerField(default=0)),
                ('episodes', models.PositiveIntegerField(default=0)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
    ]
