// Typed client for the reader-study backend. The payload types mirror the
// server exactly: note there is no ground-truth field anywhere on purpose.

export interface SessionInfo {
  session_id: string
  task: 'discrimination' | 'comparative' | 'annotation'
  total_items: number
}

export interface ItemImage {
  role: string
  url: string
}

export interface NextItemPayload {
  done: boolean
  item_id?: string
  index?: number
  total: number
  task?: string
  images?: ItemImage[]
}

export interface RectAnnotation {
  x: number
  y: number
  width: number
  height: number
  remark?: string
}

export interface ResponsePayload {
  item_id: string
  answer?: string
  realism_score?: number
  annotations?: RectAnnotation[]
}

export interface Ack {
  session_id: string
  item_id: string
  recorded: boolean
  correct?: boolean
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message)
  }
}

async function jsonOrThrow(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = resp.statusText
    try {
      const body = await resp.json()
      detail = body.detail ?? detail
    } catch {
      // keep statusText
    }
    throw new ApiError(resp.status, detail)
  }
  return resp.json()
}

export class ReaderApi {
  constructor(private baseUrl: string = '') {}

  async createSession(
    readerId: string,
    task: SessionInfo['task'],
    seed?: number,
    nItems?: number,
  ): Promise<SessionInfo> {
    const resp = await fetch(`${this.baseUrl}/sessions`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ reader_id: readerId, task, seed, n_items: nItems }),
    })
    return jsonOrThrow(resp)
  }

  async nextItem(sessionId: string): Promise<NextItemPayload> {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/next`)
    return jsonOrThrow(resp)
  }

  async submitResponse(sessionId: string, payload: ResponsePayload): Promise<Ack> {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/responses`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(payload),
    })
    return jsonOrThrow(resp)
  }

  imageUrl(relative: string): string {
    return `${this.baseUrl}${relative}`
  }

  exportUrl(sessionId: string): string {
    return `${this.baseUrl}/sessions/${sessionId}/export.csv`
  }
}
