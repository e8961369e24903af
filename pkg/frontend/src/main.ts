// Bootstrap for the delivered measurement page: read the inline task
// descriptor, announce the attempt, run the task, report the outcome.

import { readTaskDescriptor, runTask } from './runner';
import { makeBeaconSubmitter } from './wire';

function start(): void {
  const task = readTaskDescriptor(document);
  if (!task || !task.measurementId || !task.collector) return;
  const submit = makeBeaconSubmitter(task.collector, task.measurementId, document);
  // Attempt provenance: init goes out before any measurement outcome, even
  // if the page navigates away before a terminal result exists.
  submit('init');
  if (task.taskType === 'noop') return;
  void runTask(task, submit, {});
}

if (typeof document !== 'undefined') {
  if (document.readyState === 'complete' || document.readyState === 'interactive') {
    start();
  } else {
    document.addEventListener('DOMContentLoaded', start);
  }
}
