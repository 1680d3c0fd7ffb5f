/** Per-session request serialization: a single request is in flight at
 * any time; later submissions wait their turn in order.  A failed task
 * rejects its own caller but never wedges the queue. */

export class SerialQueue {
  private tail: Promise<unknown> = Promise.resolve();
  private depth = 0;

  /** True while any task is running or waiting. */
  get busy(): boolean {
    return this.depth > 0;
  }

  run<T>(task: () => Promise<T>): Promise<T> {
    this.depth += 1;
    const result = this.tail.then(task);
    const settled = result.finally(() => {
      this.depth -= 1;
    });
    this.tail = settled.catch(() => undefined);
    return settled;
  }
}
