from django.db import models
from django.utils import timezone


ARCH_CHOICES = [
    ('transformer', 'Transformer'),
    ('cnn', 'CNN'),
]


class TrainingRun(models.Model):
    """One `train` launch and where its artefacts landed."""
    arch = models.CharField(max_length=20, choices=ARCH_CHOICES)
    alpha = models.FloatField()
    seed = models.BigIntegerField(default=0)
    out_dir = models.CharField(max_length=500)
    checkpoint_path = models.CharField(max_length=500, blank=True)
    env_steps = models.PositiveIntegerField(default=0)
    episodes = models.PositiveIntegerField(default=0)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.arch} alpha={self.alpha:g} seed={self.seed}"

    @property
    def is_finished(self):
        return self.finished_at is not None

    def mark_finished(self, checkpoint_path, env_steps, episodes):
        self.checkpoint_path = str(checkpoint_path)
        self.env_steps = env_steps
        self.episodes = episodes
        self.finished_at = timezone.now()
        self.save()


class EvaluationRun(models.Model):
    checkpoint_path = models.CharField(max_length=500, blank=True)  # empty for the oracle
    arch = models.CharField(max_length=20, default='oracle')
    alpha = models.FloatField(null=True, blank=True)
    episodes = models.PositiveIntegerField()
    seed = models.BigIntegerField(default=0)
    success_rate = models.FloatField()
    avg_attempts = models.FloatField()
    avg_excess_force = models.FloatField(null=True, blank=True)
    std_attempts = models.FloatField(null=True, blank=True)
    report_path = models.CharField(max_length=500, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.arch} on {self.episodes} episodes: success {self.success_rate:.3f}"
