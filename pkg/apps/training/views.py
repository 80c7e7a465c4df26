from rest_framework import generics, permissions
from rest_framework.response import Response
from rest_framework.views import APIView

from .experiments import stored_summaries, summarize
from .models import ExperimentRun
from .serializers import ExperimentRunDetailSerializer, ExperimentRunSerializer

# Runs still queued or training do not enter summaries
FINISHED_STATUSES = [
    ExperimentRun.Status.CONVERGED,
    ExperimentRun.Status.BUDGET,
    ExperimentRun.Status.EPOCH_LIMIT,
    ExperimentRun.Status.PLATEAU,
    ExperimentRun.Status.DIVERGED,
    ExperimentRun.Status.FAILED,
]


class ExperimentRunListAPIView(generics.ListAPIView):
    serializer_class = ExperimentRunSerializer
    permission_classes = [permissions.IsAuthenticated]

    def get_queryset(self):
        queryset = ExperimentRun.objects.all()
        group = self.request.query_params.get('group', None)
        if group:
            queryset = queryset.filter(group=group)
        return queryset


class ExperimentRunDetailAPIView(generics.RetrieveAPIView):
    serializer_class = ExperimentRunDetailSerializer
    permission_classes = [permissions.IsAuthenticated]
    queryset = ExperimentRun.objects.prefetch_related('epochs')


class ReplicationSummaryAPIView(APIView):
    """Replication statistics over the finished runs of a group, one row per solver label and depth."""
    permission_classes = [permissions.IsAuthenticated]

    def get(self, request):
        queryset = ExperimentRun.objects.filter(status__in=FINISHED_STATUSES)
        group = request.query_params.get('group', None)
        if group:
            queryset = queryset.filter(group=group)
        rows = summarize(stored_summaries(queryset.order_by('id')))
        return Response({'group': group, 'results': rows})
