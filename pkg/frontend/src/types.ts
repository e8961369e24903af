// Wire types shared with the coordinator's task descriptors and the
// collector's submission endpoint.

export type TaskType = 'image' | 'stylesheet' | 'inlineframe' | 'script' | 'noop';

export interface StyleProbe {
  selector: string;
  property: string;
  expectedValue: string;
}

export interface TaskDescriptor {
  taskType: TaskType;
  measurementId: string;
  resourceUrl?: string;
  pageUrl?: string;
  styleProbe?: StyleProbe;
  maxBytes?: number;
  needsReview?: boolean;
  scriptSafe?: boolean;
  chromeOnly?: boolean;
  budget?: number;
  collector?: string;
}

export type SubmitState = 'init' | 'success' | 'failure';

/** Sends one result to the collector; implementations must be fire-and-forget. */
export type Submitter = (state: SubmitState, elapsedMs?: number) => void;

export interface RunnerOptions {
  /** Timeout for a single measurement attempt. */
  timeoutMs?: number;
  /** Injected for tests; defaults to the real document. */
  doc?: Document;
}
