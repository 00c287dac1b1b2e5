/** Incremental parser for server-sent events arriving over fetch streams. */

export interface SSEEvent {
  event: string;
  data: string;
}

export class SSEParser {
  private buffer = "";

  /** Feed a raw chunk; returns the events completed by it. */
  feed(chunk: string): SSEEvent[] {
    this.buffer += chunk;
    const events: SSEEvent[] = [];
    let boundary = this.buffer.indexOf("\n\n");
    while (boundary >= 0) {
      const block = this.buffer.slice(0, boundary);
      this.buffer = this.buffer.slice(boundary + 2);
      const parsed = parseBlock(block);
      if (parsed) {
        events.push(parsed);
      }
      boundary = this.buffer.indexOf("\n\n");
    }
    return events;
  }
}

function parseBlock(block: string): SSEEvent | null {
  let event = "message";
  const data: string[] = [];
  for (const line of block.split("\n")) {
    if (line.startsWith("event: ")) {
      event = line.slice(7).trim();
    } else if (line.startsWith("data: ")) {
      data.push(line.slice(6));
    }
  }
  if (data.length === 0) {
    return null;
  }
  return { event, data: data.join("\n") };
}

export interface StreamHandlers {
  onToken: (token: string) => void;
  onFinal: (payload: unknown) => void;
  onError?: (message: string) => void;
}

/** Drain a fetch response body, dispatching token/final events. */
export async function consumeEventStream(
  body: ReadableStream<Uint8Array>,
  handlers: StreamHandlers,
): Promise<void> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  const parser = new SSEParser();
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) {
        break;
      }
      for (const event of parser.feed(decoder.decode(value, { stream: true }))) {
        if (event.event === "token") {
          handlers.onToken(JSON.parse(event.data) as string);
        } else if (event.event === "final") {
          handlers.onFinal(JSON.parse(event.data));
        }
      }
    }
  } catch (err) {
    handlers.onError?.(String(err));
  }
}
